"""Stochastic view transforms: random resized crops and affine/color alternatives.

Every view is a differentiable map from a full image to a fixed-size image and
exposes ``vjp`` so gradients computed on the view can be pulled back onto the
full-resolution perturbation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse

from .imagecore import resize_bilinear, resize_bilinear_vjp

log = logging.getLogger(__name__)

MAX_CROP_ATTEMPTS = 10

# crop-scale grid used by the crop-range ablation
CROP_SCALE_PRESETS = {
    "0.1-0.4": (0.1, 0.4),
    "0.5-0.9": (0.5, 0.9),
    "0.5-1.0": (0.5, 1.0),
    "0.1-0.9": (0.1, 0.9),
}


class TransformError(ValueError):
    pass


class MatchingMode(str, Enum):
    GLOBAL_GLOBAL = "global-global"
    LOCAL_GLOBAL = "local-global"
    GLOBAL_LOCAL = "global-local"
    LOCAL_LOCAL = "local-local"

    @property
    def source_local(self) -> bool:
        return self in (MatchingMode.LOCAL_GLOBAL, MatchingMode.LOCAL_LOCAL)

    @property
    def target_local(self) -> bool:
        return self in (MatchingMode.GLOBAL_LOCAL, MatchingMode.LOCAL_LOCAL)


@dataclass(frozen=True)
class CropConfig:
    scale_lo: float = 0.5
    scale_hi: float = 1.0
    aspect_lo: float = 3 / 4
    aspect_hi: float = 4 / 3
    out_side: int | None = None

    def __post_init__(self):
        if not (0.0 < self.scale_lo <= self.scale_hi <= 1.0):
            raise TransformError(
                f"crop scale must satisfy 0 < lo <= hi <= 1, got [{self.scale_lo}, {self.scale_hi}]"
            )
        if not (0.0 < self.aspect_lo <= self.aspect_hi):
            raise TransformError(
                f"aspect bounds must satisfy 0 < lo <= hi, got [{self.aspect_lo}, {self.aspect_hi}]"
            )
        if self.out_side is not None and self.out_side < 1:
            raise TransformError("out_side must be positive")


@dataclass(frozen=True)
class CropRegion:
    top: int
    left: int
    crop_h: int
    crop_w: int
    fallback: bool = field(default=False, compare=False)

    @property
    def area(self) -> int:
        return self.crop_h * self.crop_w

    @property
    def bottom(self) -> int:
        return self.top + self.crop_h

    @property
    def right(self) -> int:
        return self.left + self.crop_w

    def inside(self, img_h: int, img_w: int) -> bool:
        return (
            self.top >= 0 and self.left >= 0 and self.crop_h >= 1 and self.crop_w >= 1
            and self.bottom <= img_h and self.right <= img_w
        )

    @classmethod
    def full(cls, img_h: int, img_w: int) -> "CropRegion":
        return cls(0, 0, img_h, img_w)


def sample_crop(cfg: CropConfig, rng: np.random.Generator, img_h: int, img_w: int) -> CropRegion:
    """Draw a crop: area fraction uniform in [lo, hi], aspect log-uniform, position uniform.

    After ``MAX_CROP_ATTEMPTS`` infeasible draws, returns a centered crop of the
    upper scale and marks it as a fallback.
    """
    if img_h < 8 or img_w < 8:
        raise TransformError(f"image {img_h}x{img_w} too small to crop")
    if cfg.scale_lo == cfg.scale_hi == 1.0:
        return CropRegion.full(img_h, img_w)
    area = img_h * img_w
    log_lo, log_hi = math.log(cfg.aspect_lo), math.log(cfg.aspect_hi)
    for _ in range(MAX_CROP_ATTEMPTS):
        target_area = area * rng.uniform(cfg.scale_lo, cfg.scale_hi)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * ratio)))
        h = int(round(math.sqrt(target_area / ratio)))
        if 0 < w <= img_w and 0 < h <= img_h:
            top = int(rng.integers(0, img_h - h + 1))
            left = int(rng.integers(0, img_w - w + 1))
            return CropRegion(top, left, h, w)
    side_scale = math.sqrt(cfg.scale_hi)
    h = max(1, min(img_h, int(round(img_h * side_scale))))
    w = max(1, min(img_w, int(round(img_w * side_scale))))
    log.warning("crop sampling infeasible after %d attempts; using center fallback", MAX_CROP_ATTEMPTS)
    return CropRegion((img_h - h) // 2, (img_w - w) // 2, h, w, fallback=True)


def overlap_fraction(r1: CropRegion, r2: CropRegion) -> float:
    """Intersection area divided by the smaller region's area."""
    ih = max(0, min(r1.bottom, r2.bottom) - max(r1.top, r2.top))
    iw = max(0, min(r1.right, r2.right) - max(r1.left, r2.left))
    return ih * iw / min(r1.area, r2.area)


def union_area(r1: CropRegion, r2: CropRegion) -> int:
    ih = max(0, min(r1.bottom, r2.bottom) - max(r1.top, r2.top))
    iw = max(0, min(r1.right, r2.right) - max(r1.left, r2.left))
    return r1.area + r2.area - ih * iw


# -- views --------------------------------------------------------------------


class View:
    """A differentiable image-to-image map with a vector-Jacobian product."""

    def __call__(self, img: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, img: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class IdentityView(View):
    def __call__(self, img):
        return np.array(img, dtype=np.float64, copy=True)

    def vjp(self, img, cotangent):
        return np.array(cotangent, dtype=np.float64, copy=True)


class CropView(View):
    """Crop ``region`` and resize it to ``out_side x out_side``."""

    def __init__(self, region: CropRegion, out_side: int):
        self.region = region
        self.out_side = int(out_side)

    def __call__(self, img):
        return apply_view(img, self.region, self.out_side)

    def vjp(self, img, cotangent):
        return apply_view_vjp(img.shape, self.region, cotangent)

    def __repr__(self):
        return f"CropView({self.region}, out_side={self.out_side})"


def apply_view(img: np.ndarray, region: CropRegion, out_side: int) -> np.ndarray:
    h, w = img.shape[:2]
    if not region.inside(h, w):
        raise TransformError(f"{region} lies outside a {h}x{w} image")
    patch = img[region.top:region.bottom, region.left:region.right]
    return resize_bilinear(patch, out_side, out_side)


def apply_view_vjp(img_shape, region: CropRegion, cotangent: np.ndarray) -> np.ndarray:
    """Gradient on the full image for a cotangent on the view; zero outside the crop."""
    grad = np.zeros(img_shape, dtype=np.float64)
    grad[region.top:region.bottom, region.left:region.right] = resize_bilinear_vjp(
        cotangent, region.crop_h, region.crop_w
    )
    return grad


def paste_back(update: np.ndarray, img_shape, region: CropRegion) -> np.ndarray:
    """Bilinearly splat a view-space field into its crop window of a zero field."""
    out = np.zeros(img_shape, dtype=np.float64)
    out[region.top:region.bottom, region.left:region.right] = resize_bilinear(
        update, region.crop_h, region.crop_w
    )
    return out


# -- view plans ---------------------------------------------------------------


@dataclass
class ViewPlan:
    """Per-iteration view source for one side of the matching.

    A global plan returns the same full-image view every iteration; a local plan
    draws a fresh crop from its own random stream.
    """

    local: bool
    crop: CropConfig
    rng: np.random.Generator | None = None
    alt: "AltTransform | None" = None

    def next_view(self, img_h: int, img_w: int, out_side: int) -> View:
        if not self.local:
            return CropView(CropRegion.full(img_h, img_w), out_side)
        if self.alt is not None:
            return ResizeAfter(sample_alt_transform(self.alt, self.rng, img_h, img_w), out_side)
        return CropView(sample_crop(self.crop, self.rng, img_h, img_w), out_side)


def make_view_pair(
    mode: MatchingMode | str,
    cfg_s: CropConfig,
    cfg_t: CropConfig,
    rng: np.random.Generator,
    alt: "AltTransform | None" = None,
) -> tuple[ViewPlan, ViewPlan]:
    """Source and target view plans for a matching mode.

    The two sides draw from independent child streams spawned off ``rng`` so
    the source crop sequence does not depend on whether the target is local.
    """
    mode = MatchingMode(mode)
    rng_s, rng_t = rng.spawn(2)
    src = ViewPlan(mode.source_local, cfg_s, rng_s, alt)
    tgt = ViewPlan(mode.target_local, cfg_t, rng_t)
    return src, tgt


# -- alternative augmentations ------------------------------------------------


ALT_KINDS = ("shear", "rotation", "translation", "color-jitter")


@dataclass(frozen=True)
class AltTransform:
    """Bounds for a non-crop augmentation.

    ``magnitude`` is the maximum shear factor, rotation in degrees, translation
    in pixels as ``(dx, dy)``, or color-jitter strength, depending on ``kind``. A sample draws
    uniformly within ``[-magnitude, magnitude]`` unless ``fixed`` is set.
    """

    kind: str
    magnitude: float = 0.0
    fixed: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ALT_KINDS:
            raise TransformError(f"unknown transform kind {self.kind!r}; expected one of {ALT_KINDS}")
        if self.magnitude < 0:
            raise TransformError("magnitude must be nonnegative")
        if self.kind == "color-jitter" and self.magnitude >= 1:
            raise TransformError("color-jitter magnitude must be below 1")


class SamplingView(View):
    """Bilinear resampling through a fixed sparse matrix (edge-replicated)."""

    def __init__(self, matrix: sparse.csr_matrix, out_h: int, out_w: int):
        self.matrix = matrix
        self.matrix_t = matrix.T.tocsr()
        self.out_h, self.out_w = out_h, out_w

    def __call__(self, img):
        h, w, c = img.shape
        return (self.matrix @ img.reshape(h * w, c)).reshape(self.out_h, self.out_w, c)

    def vjp(self, img, cotangent):
        h, w, c = img.shape
        return (self.matrix_t @ cotangent.reshape(-1, c)).reshape(h, w, c)


def affine_sampling_matrix(a: np.ndarray, img_h: int, img_w: int) -> sparse.csr_matrix:
    """Sampling matrix for output pixel p reading input at ``a @ (p - c) + c``.

    ``a`` is 2x2 acting on (row, col) offsets from the image center ``c``.
    Out-of-range reads clamp to the border (edge replication).
    """
    cy, cx = (img_h - 1) / 2, (img_w - 1) / 2
    yy, xx = np.mgrid[0:img_h, 0:img_w]
    dy, dx = (yy - cy).ravel(), (xx - cx).ravel()
    sy = np.clip(a[0, 0] * dy + a[0, 1] * dx + cy, 0, img_h - 1)
    sx = np.clip(a[1, 0] * dy + a[1, 1] * dx + cx, 0, img_w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, img_h - 1)
    x1 = np.minimum(x0 + 1, img_w - 1)
    wy, wx = sy - y0, sx - x0
    n = img_h * img_w
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([y0 * img_w + x0, y0 * img_w + x1, y1 * img_w + x0, y1 * img_w + x1])
    vals = np.concatenate([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


class ShiftView(View):
    """Integer translation with edge replication; exact per-pixel gather."""

    def __init__(self, dy: int, dx: int, img_h: int, img_w: int):
        self.dy, self.dx = int(dy), int(dx)
        self.rows = np.clip(np.arange(img_h) - self.dy, 0, img_h - 1)
        self.cols = np.clip(np.arange(img_w) - self.dx, 0, img_w - 1)

    def __call__(self, img):
        return img[self.rows][:, self.cols].astype(np.float64)

    def vjp(self, img, cotangent):
        grad = np.zeros(img.shape, dtype=np.float64)
        tmp = np.zeros((img.shape[0], cotangent.shape[1], img.shape[2]))
        np.add.at(tmp, self.rows, cotangent)
        np.add.at(grad, (slice(None), self.cols), tmp)
        return grad


class ColorJitterView(View):
    """Brightness, contrast and saturation factors applied then clipped to [0, 1]."""

    _luma = np.array([0.299, 0.587, 0.114])

    def __init__(self, brightness: float, contrast: float, saturation: float):
        self.b, self.c, self.s = brightness, contrast, saturation

    def _forward(self, img):
        x = img * self.b
        gray = x @ self._luma
        mean = gray.mean()
        x = (x - mean) * self.c + mean
        gray = x @ self._luma
        x = (x - gray[..., None]) * self.s + gray[..., None]
        return x

    def __call__(self, img):
        return np.clip(self._forward(img), 0.0, 1.0)

    def vjp(self, img, cotangent):
        raw = self._forward(img)
        g = np.where((raw >= 0.0) & (raw <= 1.0), cotangent, 0.0)
        # saturation: x_out = s*x + (1-s)*gray(x) broadcast
        g_gray = (1 - self.s) * g.sum(axis=-1)
        g = self.s * g + g_gray[..., None] * self._luma
        # contrast: x_out = c*x + (1-c)*mean(gray(x))
        total = (1 - self.c) * g.sum() / (img.shape[0] * img.shape[1])
        g = self.c * g + total * self._luma
        return g * self.b


class ResizeAfter(View):
    """Compose a same-size view with a resize to ``out_side``."""

    def __init__(self, inner: View, out_side: int):
        self.inner, self.out_side = inner, int(out_side)

    def __call__(self, img):
        return resize_bilinear(self.inner(img), self.out_side, self.out_side)

    def vjp(self, img, cotangent):
        h, w = img.shape[:2]
        return self.inner.vjp(img, resize_bilinear_vjp(cotangent, h, w))


def sample_alt_transform(t: AltTransform, rng: np.random.Generator | None, img_h: int, img_w: int) -> View:
    """Draw one augmentation view of unchanged size from ``t``'s bounds."""
    if t.fixed is not None:
        params = tuple(float(p) for p in t.fixed)
    else:
        if rng is None:
            raise TransformError("a random stream is required unless parameters are fixed")
        k = {"shear": 1, "rotation": 1, "translation": 2, "color-jitter": 3}[t.kind]
        params = tuple(rng.uniform(-t.magnitude, t.magnitude, size=k))
    if t.kind == "rotation":
        (deg,) = params
        if deg == 0:
            return IdentityView()
        th = math.radians(deg)
        a = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        return SamplingView(affine_sampling_matrix(a, img_h, img_w), img_h, img_w)
    if t.kind == "shear":
        (k,) = params
        if k == 0:
            return IdentityView()
        a = np.array([[1.0, 0.0], [k, 1.0]])
        return SamplingView(affine_sampling_matrix(a, img_h, img_w), img_h, img_w)
    if t.kind == "translation":
        dx, dy = (int(round(p)) for p in params)
        return ShiftView(dy, dx, img_h, img_w)
    b, c, s = params
    if b == c == s == 0:
        return IdentityView()
    return ColorJitterView(1 + b, 1 + c, 1 + s)


__all__ = [
    "ALT_KINDS",
    "AltTransform",
    "CROP_SCALE_PRESETS",
    "ColorJitterView",
    "CropConfig",
    "CropRegion",
    "CropView",
    "IdentityView",
    "MatchingMode",
    "ResizeAfter",
    "SamplingView",
    "ShiftView",
    "TransformError",
    "View",
    "ViewPlan",
    "apply_view",
    "apply_view_vjp",
    "make_view_pair",
    "overlap_fraction",
    "paste_back",
    "sample_alt_transform",
    "sample_crop",
    "union_area",
]
