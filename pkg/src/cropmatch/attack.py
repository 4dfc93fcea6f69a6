"""Ensemble embedding matching and the iterative l-inf attack loop.

The perturbation lives at full image resolution. Each iteration draws a source
view (a random resized crop in local modes), scores it against the target view
with the ensemble's weighted cosine similarity, pulls the gradient back through
the view, and takes one optimizer step followed by projection.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .encoders import (
    EncoderEnsemble,
    EncoderError,
    NotDifferentiableError,
    cosine_similarity,
    cosine_similarity_grad,
    embed,
    embed_vjp,
    preprocess,
    preprocess_vjp,
)
from .imagecore import Perturbation, check_image
from .transforms import (
    AltTransform,
    CropConfig,
    CropView,
    CropRegion,
    MatchingMode,
    apply_view,
    make_view_pair,
    paste_back,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("ifgsm", "mifgsm", "pgd-adam")


class AttackError(RuntimeError):
    pass


class AttackDiverged(AttackError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class AttackConfig:
    epsilon_255: int = 16
    steps: int = 300
    alpha_255: float = 1.0
    optimizer: str = "ifgsm"
    beta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_small: float = 1e-8
    mode: MatchingMode = MatchingMode.LOCAL_GLOBAL
    crop_source: CropConfig = field(default_factory=CropConfig)
    crop_target: CropConfig | None = None
    alt_transform: AltTransform | None = None
    seed: int = 0
    pasteback: bool = False
    mifgsm_normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", MatchingMode(self.mode))
        if isinstance(self.crop_source, dict):
            object.__setattr__(self, "crop_source", CropConfig(**self.crop_source))
        if isinstance(self.crop_target, dict):
            object.__setattr__(self, "crop_target", CropConfig(**self.crop_target))
        if isinstance(self.alt_transform, dict):
            alt = dict(self.alt_transform)
            if alt.get("fixed") is not None:
                alt["fixed"] = tuple(alt["fixed"])
            object.__setattr__(self, "alt_transform", AltTransform(**alt))
        if not (isinstance(self.epsilon_255, (int, np.integer)) and 1 <= self.epsilon_255 <= 255):
            raise AttackError(f"epsilon_255 must be an integer in 1..255, got {self.epsilon_255!r}")
        if self.steps < 1:
            raise AttackError(f"steps must be at least 1, got {self.steps}")
        if not self.alpha_255 > 0:
            raise AttackError(f"alpha_255 must be positive, got {self.alpha_255}")
        if self.optimizer not in OPTIMIZERS:
            raise AttackError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")

    @property
    def epsilon(self) -> float:
        return self.epsilon_255 / 255.0

    @property
    def alpha(self) -> float:
        return self.alpha_255 / 255.0

    @property
    def target_crop(self) -> CropConfig:
        return self.crop_target or self.crop_source

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass(frozen=True)
class OptimizerState:
    clean: np.ndarray
    delta: np.ndarray
    momentum: np.ndarray | None = None
    m: np.ndarray | None = None
    v2: np.ndarray | None = None
    t: int = 0

    @classmethod
    def zeros(cls, clean: np.ndarray) -> "OptimizerState":
        z = np.zeros_like(clean, dtype=np.float64)
        return cls(clean, z, z.copy(), z.copy(), z.copy(), 0)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    delta: Perturbation
    trace: list[float]
    member_trace: np.ndarray
    member_names: list[str]
    final_similarities: list[float]
    clean_similarities: list[float]
    config: AttackConfig
    seed: int
    weights: list[float] = field(default_factory=list)

    @property
    def final_similarity(self) -> float:
        return float(np.dot(self.weights, self.final_similarities))

    @property
    def clean_similarity(self) -> float:
        return float(np.dot(self.weights, self.clean_similarities))

    @property
    def gain(self) -> float:
        return self.final_similarity - self.clean_similarity

    def write_trace_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "ensemble_similarity", *self.member_names])
            for i, (s, row) in enumerate(zip(self.trace, self.member_trace)):
                w.writerow([i, repr(float(s)), *(repr(float(x)) for x in row)])
        return path


# -- loss ---------------------------------------------------------------------


def target_embeddings(ens: EncoderEnsemble, tgt_view: np.ndarray) -> list[np.ndarray]:
    return [embed(enc, preprocess(tgt_view, enc)) for enc in ens.members]


def member_similarities_and_grad(ens: EncoderEnsemble, src_view: np.ndarray, tgt_embs: list[np.ndarray]):
    """Per-member cosine similarities and the weighted gradient on ``src_view``."""
    sims = []
    grad = np.zeros_like(src_view, dtype=np.float64)
    for (enc, w), t in zip(ens, tgt_embs):
        if not enc.differentiable:
            raise NotDifferentiableError(f"encoder {enc.name!r} cannot supply gradients")
        x = preprocess(src_view, enc)
        e = embed(enc, x)
        sims.append(cosine_similarity(e, t))
        if w == 0:
            continue
        g_embed = cosine_similarity_grad(e, t)
        if not np.any(g_embed):
            continue
        grad += w * preprocess_vjp(src_view, enc, embed_vjp(enc, x, g_embed))
    return sims, grad


def ensemble_similarity_and_grad(ens: EncoderEnsemble, src_view: np.ndarray, tgt_view: np.ndarray):
    """Weighted mean cosine similarity over members and its gradient on ``src_view``."""
    if not len(ens.members):
        raise EncoderError("empty ensemble")
    sims, grad = member_similarities_and_grad(ens, src_view, target_embeddings(ens, tgt_view))
    return float(np.dot(ens.weights, sims)), grad


def ensemble_similarities(ens: EncoderEnsemble, a: np.ndarray, b: np.ndarray) -> list[float]:
    """Per-member cosine similarity of two full images (no cropping)."""
    return [
        cosine_similarity(embed(enc, preprocess(a, enc)), embed(enc, preprocess(b, enc)))
        for enc in ens.members
    ]


# -- projection and update rules ----------------------------------------------


def project(delta: np.ndarray, clean: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip to the l-inf ball, then keep ``clean + delta`` inside [0, 1]."""
    d = np.clip(delta, -epsilon, epsilon)
    adv = np.clip(clean + d, 0.0, 1.0)
    d = adv - clean
    # float rounding in (clean + d) - clean can exceed the ball by an ulp
    return np.clip(d, -epsilon, epsilon)


def _check_grad(grad):
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite gradient entries")


def ifgsm_step(state: OptimizerState, grad: np.ndarray, cfg: AttackConfig) -> OptimizerState:
    _check_grad(grad)
    delta = project(state.delta + cfg.alpha * np.sign(grad), state.clean, cfg.epsilon)
    return replace(state, delta=delta, t=state.t + 1)


def mifgsm_step(state: OptimizerState, grad: np.ndarray, cfg: AttackConfig) -> OptimizerState:
    """Momentum accumulation ``v <- v + beta * g`` followed by a sign step.

    With ``cfg.mifgsm_normalize`` the classic form ``v <- beta * v + g / |g|_1``
    is used instead.
    """
    _check_grad(grad)
    v = state.momentum if state.momentum is not None else np.zeros_like(grad)
    if cfg.mifgsm_normalize:
        l1 = np.abs(grad).sum()
        v = cfg.beta * v + (grad / l1 if l1 > 0 else grad)
    else:
        v = v + cfg.beta * grad
    delta = project(state.delta + cfg.alpha * np.sign(v), state.clean, cfg.epsilon)
    return replace(state, delta=delta, momentum=v, t=state.t + 1)


def pgd_adam_step(state: OptimizerState, grad: np.ndarray, cfg: AttackConfig) -> OptimizerState:
    _check_grad(grad)
    t = state.t + 1
    m = state.m if state.m is not None else np.zeros_like(grad)
    v2 = state.v2 if state.v2 is not None else np.zeros_like(grad)
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad
    v2 = cfg.beta2 * v2 + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v2 / (1 - cfg.beta2 ** t)
    step = cfg.alpha * m_hat / (np.sqrt(v_hat) + cfg.eps_small)
    delta = project(state.delta + step, state.clean, cfg.epsilon)
    return replace(state, delta=delta, m=m, v2=v2, t=t)


STEP_RULES: dict[str, Callable] = {
    "ifgsm": ifgsm_step,
    "mifgsm": mifgsm_step,
    "pgd-adam": pgd_adam_step,
}


# -- attack loop --------------------------------------------------------------


def run_attack(
    clean: np.ndarray,
    target: np.ndarray,
    cfg: AttackConfig,
    ens: EncoderEnsemble,
    rng: np.random.Generator | None = None,
    callback: Callable[[int, OptimizerState, OptimizerState], None] | None = None,
) -> AttackResult:
    """Run ``cfg.steps`` iterations of view matching and return the result.

    ``rng`` defaults to a generator seeded with ``cfg.seed``. ``callback`` is
    invoked after every step with ``(step, previous_state, new_state)``.
    """
    clean = check_image(clean)
    target = check_image(target)
    if clean.shape != target.shape:
        raise AttackError(f"clean {clean.shape} and target {target.shape} must share a size")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    h, w = clean.shape[:2]
    out_side = cfg.crop_source.out_side or h
    tgt_side = cfg.target_crop.out_side or h
    step_rule = STEP_RULES[cfg.optimizer]
    src_plan, tgt_plan = make_view_pair(cfg.mode, cfg.crop_source, cfg.target_crop, rng, cfg.alt_transform)

    fixed_tgt = None
    if not tgt_plan.local:
        fixed_tgt = target_embeddings(ens, apply_view(target, CropRegion.full(h, w), tgt_side))

    state = OptimizerState.zeros(clean)
    trace: list[float] = []
    member_trace = np.zeros((cfg.steps, len(ens)))
    for i in range(cfg.steps):
        adv = clean + state.delta
        view = src_plan.next_view(h, w, out_side)
        src_view = view(adv)
        if fixed_tgt is None:
            tgt_embs = target_embeddings(ens, tgt_plan.next_view(h, w, tgt_side)(target))
        else:
            tgt_embs = fixed_tgt
        sims, g_view = member_similarities_and_grad(ens, src_view, tgt_embs)
        sim = float(np.dot(ens.weights, sims))
        if not np.isfinite(sim):
            raise AttackDiverged(f"non-finite similarity at step {i}", trace)
        trace.append(sim)
        member_trace[i] = sims
        if cfg.pasteback and isinstance(view, CropView):
            grad = paste_back(np.sign(g_view), clean.shape, view.region)
        else:
            grad = view.vjp(adv, g_view)
        new_state = step_rule(state, grad, cfg)
        if callback is not None:
            callback(i, state, new_state)
        state = new_state

    adversarial = clean + state.delta
    return AttackResult(
        adversarial=adversarial,
        delta=Perturbation(state.delta, cfg.epsilon),
        trace=trace,
        member_trace=member_trace,
        member_names=[m.name for m in ens.members],
        final_similarities=ensemble_similarities(ens, adversarial, target),
        clean_similarities=ensemble_similarities(ens, clean, target),
        config=cfg,
        seed=cfg.seed,
        weights=list(ens.weights),
    )


__all__ = [
    "AttackConfig",
    "AttackDiverged",
    "AttackError",
    "AttackResult",
    "OPTIMIZERS",
    "OptimizerState",
    "STEP_RULES",
    "ensemble_similarities",
    "ensemble_similarity_and_grad",
    "ifgsm_step",
    "member_similarities_and_grad",
    "mifgsm_step",
    "pgd_adam_step",
    "project",
    "run_attack",
    "target_embeddings",
]
