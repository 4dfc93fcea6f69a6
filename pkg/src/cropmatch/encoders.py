"""Surrogate image encoders, their preprocessing, and ensembles.

An :class:`Encoder` maps a preprocessed ``(S, S, 3)`` array to a 1-D embedding
and supplies the vector-Jacobian product of that map. :class:`ToyEncoder` is a
closed-form stand-in (patch pooling, fixed random projection, tanh) that is
fast enough for desk-scale experiments. Pretrained models plug in through
:class:`AdapterEncoder`.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .imagecore import resize_bilinear, resize_bilinear_vjp

# CLIP image normalization constants
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class EncoderError(ValueError):
    pass


class NotDifferentiableError(EncoderError):
    pass


@dataclass
class Encoder:
    name: str
    input_side: int
    embed_dim: int
    patch_size: int
    mean: tuple[float, float, float] = CLIP_MEAN
    std: tuple[float, float, float] = CLIP_STD
    differentiable: bool = True

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape != (self.input_side, self.input_side, 3):
            raise EncoderError(
                f"{self.name}: expected input {(self.input_side, self.input_side, 3)}, got {x.shape}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "input_side": self.input_side,
            "embed_dim": self.embed_dim,
            "patch_size": self.patch_size,
            "mean": list(self.mean),
            "std": list(self.std),
        }


def preprocess(img: np.ndarray, enc: Encoder) -> np.ndarray:
    """Resize to the encoder's input side, then normalize per channel."""
    x = resize_bilinear(img, enc.input_side, enc.input_side)
    return (x - np.asarray(enc.mean)) / np.asarray(enc.std)


def preprocess_vjp(img: np.ndarray, enc: Encoder, cotangent: np.ndarray) -> np.ndarray:
    g = cotangent / np.asarray(enc.std)
    return resize_bilinear_vjp(g, img.shape[0], img.shape[1])


def embed(enc: Encoder, x: np.ndarray) -> np.ndarray:
    enc._check_input(x)
    return enc.forward(x)


def embed_vjp(enc: Encoder, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``<embed(x), cotangent>`` with respect to ``x``."""
    if not enc.differentiable:
        raise NotDifferentiableError(f"encoder {enc.name!r} declares no VJP")
    enc._check_input(x)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != (enc.embed_dim,):
        raise EncoderError(f"cotangent must have length {enc.embed_dim}, got {cotangent.shape}")
    return enc.backward(x, cotangent)


class ToyEncoder(Encoder):
    """Patch mean-pooling, a seeded random linear map, and an elementwise tanh.

    ``embedding = tanh(W @ pool(x) + b)`` where ``pool`` averages each
    non-overlapping ``patch_size`` square per channel. With
    ``nonlinearity="identity"`` the map is affine.
    """

    def __init__(
        self,
        seed: int,
        input_side: int = 64,
        embed_dim: int = 64,
        patch_size: int = 16,
        *,
        gain: float = 1.0,
        bias_scale: float = 0.0,
        nonlinearity: str = "tanh",
        mean=CLIP_MEAN,
        std=CLIP_STD,
        name: str | None = None,
    ):
        if patch_size < 1 or input_side % patch_size:
            raise EncoderError(f"patch size {patch_size} does not divide input side {input_side}")
        if embed_dim < 1:
            raise EncoderError("embed_dim must be positive")
        if nonlinearity not in ("tanh", "identity"):
            raise EncoderError(f"unknown nonlinearity {nonlinearity!r}")
        super().__init__(
            name=name or f"toy-p{patch_size}-s{seed}",
            input_side=input_side,
            embed_dim=embed_dim,
            patch_size=patch_size,
            mean=tuple(mean),
            std=tuple(std),
        )
        self.seed = seed
        self.nonlinearity = nonlinearity
        self.gain = gain
        self.bias_scale = bias_scale
        self.grid = input_side // patch_size
        n_features = self.grid * self.grid * 3
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((embed_dim, n_features)) * (gain / np.sqrt(n_features))
        self.bias = rng.standard_normal(embed_dim) * bias_scale
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)
        # (grid, side) averaging matrix; pooling is separable over rows and columns
        self._avg = np.kron(np.eye(self.grid), np.full((1, patch_size), 1.0 / patch_size))

    def pool(self, x: np.ndarray) -> np.ndarray:
        rows = np.tensordot(self._avg, x, axes=(1, 0))
        return np.tensordot(rows, self._avg, axes=(1, 1)).transpose(0, 2, 1).ravel()

    def pool_vjp(self, cot: np.ndarray) -> np.ndarray:
        cell = cot.reshape(self.grid, self.grid, 3)
        rows = np.tensordot(self._avg, cell, axes=(0, 0))
        return np.ascontiguousarray(np.tensordot(rows, self._avg, axes=(1, 0)).transpose(0, 2, 1))

    def forward(self, x):
        z = self.weight @ self.pool(x) + self.bias
        return np.tanh(z) if self.nonlinearity == "tanh" else z

    def backward(self, x, cotangent):
        if self.nonlinearity == "tanh":
            e = self.forward(x)
            cotangent = cotangent * (1.0 - e * e)
        return self.pool_vjp(self.weight.T @ cotangent)

    def manifest(self):
        m = super().manifest()
        m.update(kind="toy", seed=self.seed, gain=self.gain, bias_scale=self.bias_scale,
                 nonlinearity=self.nonlinearity)
        return m


def toy_encoder_new(seed: int, input_side: int = 64, embed_dim: int = 64, patch_size: int = 16, **kw) -> ToyEncoder:
    return ToyEncoder(seed, input_side, embed_dim, patch_size, **kw)


class AdapterEncoder(Encoder):
    """Wraps external forward/VJP callables described by a manifest entry.

    ``forward(x) -> embedding`` and ``vjp(x, cotangent) -> grad`` operate on
    preprocessed ``(S, S, 3)`` float arrays. Omitting ``vjp`` makes the adapter
    usable for evaluation only.
    """

    def __init__(self, manifest: dict, forward: Callable, vjp: Callable | None = None):
        super().__init__(
            name=manifest["name"],
            input_side=int(manifest["input_side"]),
            embed_dim=int(manifest["embed_dim"]),
            patch_size=int(manifest.get("patch_size", 0)),
            mean=tuple(manifest.get("mean", CLIP_MEAN)),
            std=tuple(manifest.get("std", CLIP_STD)),
            differentiable=vjp is not None,
        )
        self._forward = forward
        self._vjp = vjp
        self._manifest = dict(manifest)

    def forward(self, x):
        out = np.asarray(self._forward(x), dtype=np.float64).ravel()
        if out.shape != (self.embed_dim,) or not np.all(np.isfinite(out)):
            raise EncoderError(f"adapter {self.name!r} returned an invalid embedding")
        return out

    def backward(self, x, cotangent):
        return np.asarray(self._vjp(x, cotangent), dtype=np.float64).reshape(x.shape)

    def manifest(self):
        return dict(self._manifest)


def torch_adapter(manifest: dict, module, device: str = "cpu") -> AdapterEncoder:
    """Adapter for a torch image model taking normalized NCHW input.

    The model's output is flattened to the embedding; gradients come from autograd.
    """
    import torch

    module = module.eval().to(device)

    def to_tensor(x, grad=False):
        t = torch.tensor(np.ascontiguousarray(x.transpose(2, 0, 1))[None], dtype=torch.float32, device=device)
        return t.requires_grad_(grad)

    def fwd(x):
        with torch.no_grad():
            return module(to_tensor(x)).reshape(-1).double().cpu().numpy()

    def vjp(x, cot):
        t = to_tensor(x, grad=True)
        out = module(t).reshape(-1)
        (g,) = torch.autograd.grad(out, t, torch.tensor(cot, dtype=out.dtype, device=device))
        return g[0].permute(1, 2, 0).double().cpu().numpy()

    return AdapterEncoder(manifest, fwd, vjp)


def _resolve(entry: str):
    mod, _, attr = entry.partition(":")
    if not attr:
        raise EncoderError(f"entry point {entry!r} must look like 'package.module:function'")
    obj = importlib.import_module(mod)
    for part in attr.split("."):
        obj = getattr(obj, part)
    return obj


def encoder_from_manifest(entry: dict) -> Encoder:
    """Build one encoder from a manifest mapping.

    ``kind: toy`` builds a :class:`ToyEncoder`. ``kind: adapter`` resolves
    ``forward``/``vjp`` entry points (``module:function``), or a ``factory``
    entry point that receives the manifest and returns an :class:`Encoder`.
    """
    entry = dict(entry)
    kind = entry.pop("kind", "toy")
    if kind == "toy":
        seed = entry.pop("seed", 0)
        allowed = {"input_side", "embed_dim", "patch_size", "gain", "bias_scale", "nonlinearity", "mean", "std", "name"}
        unknown = set(entry) - allowed
        if unknown:
            raise EncoderError(f"unknown toy encoder keys: {sorted(unknown)}")
        return ToyEncoder(seed, **entry)
    if kind == "adapter":
        if "factory" in entry:
            enc = _resolve(entry["factory"])(entry)
            if not isinstance(enc, Encoder):
                raise EncoderError(f"factory {entry['factory']!r} did not return an Encoder")
            return enc
        missing = {"name", "input_side", "embed_dim", "forward"} - set(entry)
        if missing:
            raise EncoderError(f"adapter manifest missing keys: {sorted(missing)}")
        vjp = _resolve(entry["vjp"]) if entry.get("vjp") else None
        return AdapterEncoder(entry, _resolve(entry["forward"]), vjp)
    raise EncoderError(f"unknown encoder kind {kind!r}")


# -- ensembles ----------------------------------------------------------------


@dataclass
class EncoderEnsemble:
    members: list[Encoder]
    weights: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise EncoderError("an ensemble needs at least one encoder")
        if not self.weights:
            self.weights = [1.0 / len(self.members)] * len(self.members)
        if len(self.weights) != len(self.members):
            raise EncoderError("one weight per member is required")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise EncoderError(f"weights must be nonnegative and sum to 1, got {self.weights}")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(zip(self.members, self.weights))

    def subset(self, names: Sequence[str]) -> "EncoderEnsemble":
        chosen = [m for m in self.members if m.name in set(names)]
        missing = set(names) - {m.name for m in chosen}
        if missing:
            raise EncoderError(f"unknown ensemble members: {sorted(missing)}")
        return EncoderEnsemble(chosen)

    def manifest(self) -> dict:
        return {"members": [m.manifest() for m in self.members], "weights": list(self.weights)}


def default_toy_ensemble(input_side: int = 224, embed_dim: int = 64, seed: int = 0) -> EncoderEnsemble:
    """Three toy encoders with patch sizes 8, 16 and 32."""
    return EncoderEnsemble([
        ToyEncoder(seed + i, input_side, embed_dim, p) for i, p in enumerate((8, 16, 32))
    ])


def load_ensemble(spec: dict | str | Path | None) -> EncoderEnsemble:
    """Ensemble from a manifest dict or JSON/YAML file; ``None`` gives the toy default."""
    if spec is None:
        return default_toy_ensemble()
    if isinstance(spec, (str, Path)):
        import yaml

        spec = yaml.safe_load(Path(spec).read_text())
    members = [encoder_from_manifest(m) for m in spec["members"]]
    return EncoderEnsemble(members, list(spec.get("weights") or []))


# -- similarity ---------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EncoderError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EncoderError("cosine similarity is undefined for a zero vector")
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_similarity_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gradient of ``cos(a, b)`` with respect to ``a``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EncoderError("cosine similarity is undefined for a zero vector")
    if np.array_equal(a, b):
        return np.zeros_like(a, dtype=np.float64)
    ua, ub = a / na, b / nb
    return (ub - (ua @ ub) * ua) / na
