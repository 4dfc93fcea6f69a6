"""Image arrays, bilinear resizing and budget-safe 8-bit persistence.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with entries in ``[0, 1]``.
Budgets are integers on the 0-255 scale and divided by 255 internally.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MIN_SIDE = 8

__all__ = [
    "ImageError",
    "Perturbation",
    "check_image",
    "load_image",
    "read_bytes_image",
    "save_adversarial",
    "quantize_adversarial",
    "resize_bilinear",
    "resize_bilinear_vjp",
    "bilinear_matrix",
    "synthetic_image",
]


class ImageError(ValueError):
    """Raised for malformed images, unreadable files or shape mismatches."""


def check_image(img: np.ndarray, min_side: int = MIN_SIDE) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) array, got shape {img.shape}")
    if img.shape[0] < min_side or img.shape[1] < min_side:
        raise ImageError(f"image {img.shape[:2]} smaller than {min_side}x{min_side}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ImageError("image entries must be finite and lie in [0, 1]")
    return img


@dataclass(frozen=True)
class Perturbation:
    """A full-resolution perturbation field together with its l-inf budget."""

    data: np.ndarray
    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ImageError(f"budget must lie in (0, 1], got {self.epsilon}")
        if np.max(np.abs(self.data), initial=0.0) > self.epsilon * (1 + 1e-12):
            raise ImageError("perturbation exceeds its l-inf budget")

    @classmethod
    def from_255(cls, data: np.ndarray, epsilon_255: int) -> "Perturbation":
        return cls(np.asarray(data, dtype=np.float64), epsilon_255 / 255.0)

    @property
    def epsilon_255(self) -> int:
        return int(round(self.epsilon * 255))

    @property
    def shape(self):
        return self.data.shape


# -- resizing ---------------------------------------------------------------


@lru_cache(maxsize=256)
def _bilinear_matrix_cached(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    m.setflags(write=False)
    return m


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D interpolation matrix ``(n_out, n_in)`` with half-pixel centers."""
    if n_in < 1 or n_out < 1:
        raise ImageError(f"sizes must be positive, got {n_in} -> {n_out}")
    return _bilinear_matrix_cached(int(n_in), int(n_out))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``(H, W, C)`` bilinearly; identity sizes return an exact copy."""
    if out_h < 1 or out_w < 1:
        raise ImageError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.array(img, dtype=np.float64, copy=True)
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    tmp = np.tensordot(ry, np.asarray(img, dtype=np.float64), axes=(1, 0))
    return np.ascontiguousarray(np.tensordot(tmp, rx, axes=(1, 1)).transpose(0, 2, 1))


def resize_bilinear_vjp(cotangent: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Pull a cotangent on the resized output back to the ``in_h x in_w`` input."""
    out_h, out_w = cotangent.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return np.array(cotangent, dtype=np.float64, copy=True)
    ry = bilinear_matrix(in_h, out_h)
    rx = bilinear_matrix(in_w, out_w)
    tmp = np.tensordot(ry, np.asarray(cotangent, dtype=np.float64), axes=(0, 0))
    return np.ascontiguousarray(np.tensordot(tmp, rx, axes=(1, 0)).transpose(0, 2, 1))


# -- file io ----------------------------------------------------------------


def read_bytes_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB file as a ``uint8`` array without resizing."""
    path = Path(path)
    if not path.is_file():
        raise ImageError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ImageError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
            return np.asarray(im, dtype=np.uint8).copy()
    except UnidentifiedImageError as exc:
        raise ImageError(f"{path}: unsupported or unreadable image format") from exc
    except OSError as exc:
        raise ImageError(f"{path}: {exc}") from exc


def load_image(path: str | os.PathLike, side: int | None = 224) -> np.ndarray:
    """Load an RGB raster as unit-range floats, resized to ``side x side``.

    ``side=None`` keeps the stored resolution.
    """
    if side is not None and side < MIN_SIDE:
        raise ImageError(f"side must be at least {MIN_SIDE}")
    img = read_bytes_image(path).astype(np.float64) / 255.0
    if side is None:
        return img
    return np.clip(resize_bilinear(img, side, side), 0.0, 1.0)


def quantize_adversarial(clean: np.ndarray, delta: Perturbation) -> np.ndarray:
    """8-bit adversarial bytes whose integer perturbation respects the budget."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != delta.shape:
        raise ImageError(f"shape mismatch: clean {clean.shape} vs delta {delta.shape}")
    eps = delta.epsilon_255
    clean_b = np.rint(clean * 255.0)
    adv_b = np.rint((clean + delta.data) * 255.0)
    adv_b = np.clip(adv_b, clean_b - eps, clean_b + eps)
    return np.clip(adv_b, 0, 255).astype(np.uint8)


def save_adversarial(clean: np.ndarray, delta: Perturbation, path: str | os.PathLike) -> Path:
    """Write ``clean + delta`` as a lossless 8-bit PNG, atomically."""
    data = quantize_adversarial(clean, delta)
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageError(f"output directory does not exist: {path.parent}")
    fmt = "PNG" if path.suffix.lower() in ("", ".png") else path.suffix.lstrip(".").upper()
    if fmt in ("JPG", "JPEG", "WEBP"):
        raise ImageError(f"{fmt} is lossy and would break the l-inf contract")
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(data, mode="RGB").save(fh, format=fmt)
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise ImageError(f"cannot write {path}: {exc}") from exc
    except Exception:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def synthetic_image(rng: np.random.Generator, side: int = 64, contrast: float = 0.2) -> np.ndarray:
    """Random test image with a 1/f amplitude spectrum, like natural photographs.

    Channels are correlated through a random color mix; the result has pixel
    standard deviation ``contrast`` around a random mean color, clipped to [0, 1].
    """
    f = np.fft.fftfreq(side)
    radius = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    radius[0, 0] = 1.0
    chans = []
    for _ in range(3):
        spectrum = (rng.standard_normal((side, side)) + 1j * rng.standard_normal((side, side))) / radius
        spectrum[0, 0] = 0.0
        x = np.real(np.fft.ifft2(spectrum))
        chans.append(x / x.std())
    x = np.stack(chans, axis=-1) @ (np.eye(3) + 0.3 * rng.standard_normal((3, 3)))
    x = x / x.std() * contrast + rng.uniform(0.35, 0.6, size=3)
    return np.clip(x, 0.0, 1.0)
