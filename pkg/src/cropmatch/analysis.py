"""Perturbation diagnostics: value ECDFs, aggregation heatmaps, global similarity."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import Encoder, cosine_similarity, embed, preprocess
from .imagecore import Perturbation

MIN_ECDF_SAMPLES = 100


class AnalysisError(ValueError):
    pass


@dataclass
class ECDFCurve:
    points: np.ndarray
    cumulative: np.ndarray
    ks_to_uniform: float


@dataclass
class HeatmapGrid:
    values: np.ndarray
    cell: int


def ks_uniform(samples: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between the samples' ECDF and U(0, 1).

    Both the right-continuous values ``i/n`` and the left limits ``(i-1)/n`` at
    each sorted sample are compared against the uniform CDF.
    """
    x = np.sort(np.clip(np.asarray(samples, dtype=np.float64).ravel(), 0.0, 1.0))
    n = x.size
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - x)
    d_minus = np.max(x - (i - 1) / n)
    return float(max(d_plus, d_minus))


def ecdf(delta: Perturbation) -> ECDFCurve:
    """ECDF of perturbation values mapped from [-eps, eps] onto [0, 1]."""
    if delta.epsilon <= 0:
        raise AnalysisError("budget must be positive")
    values = np.asarray(delta.data, dtype=np.float64).ravel()
    if values.size < MIN_ECDF_SAMPLES:
        raise AnalysisError(f"need at least {MIN_ECDF_SAMPLES} entries, got {values.size}")
    mapped = np.sort((values + delta.epsilon) / (2 * delta.epsilon))
    cumulative = np.arange(1, mapped.size + 1) / mapped.size
    return ECDFCurve(mapped, cumulative, ks_uniform(mapped))


def ecdf_band(curves: Sequence[ECDFCurve], grid: np.ndarray | None = None):
    """Pointwise mean and standard deviation of several ECDFs on a common grid."""
    if not curves:
        raise AnalysisError("no curves")
    grid = np.linspace(0.0, 1.0, 101) if grid is None else np.asarray(grid)
    stack = np.stack([np.searchsorted(c.points, grid, side="right") / c.points.size for c in curves])
    return grid, stack.mean(axis=0), stack.std(axis=0)


def heatmap(delta: Perturbation | np.ndarray, cell: int) -> HeatmapGrid:
    """Per-cell mean of the channel-averaged |delta|, scaled so the max cell is 1."""
    d = np.asarray(delta.data if isinstance(delta, Perturbation) else delta, dtype=np.float64)
    h, w = d.shape[:2]
    if cell < 1 or h % cell or w % cell:
        raise AnalysisError(f"cell size {cell} does not divide {h}x{w}")
    mag = np.abs(d).mean(axis=-1)
    grid = mag.reshape(h // cell, cell, w // cell, cell).mean(axis=(1, 3))
    top = grid.max()
    return HeatmapGrid(grid / top if top > 0 else grid, cell)


def central_window(h: int, w: int) -> np.ndarray:
    """Boolean mask of the centered window covering half the image area."""
    kh, kw = int(round(h / np.sqrt(2))), int(round(w / np.sqrt(2)))
    top, left = (h - kh) // 2, (w - kw) // 2
    mask = np.zeros((h, w), dtype=bool)
    mask[top:top + kh, left:left + kw] = True
    return mask


def central_dominance(delta: Perturbation | np.ndarray) -> tuple[float, float]:
    """Mean |delta| inside and outside the centered half-area window."""
    d = np.asarray(delta.data if isinstance(delta, Perturbation) else delta, dtype=np.float64)
    mag = np.abs(d).mean(axis=-1)
    mask = central_window(*mag.shape)
    return float(mag[mask].mean()), float(mag[~mask].mean())


def global_similarity(enc: Encoder, adv: np.ndarray, target: np.ndarray) -> float:
    return cosine_similarity(embed(enc, preprocess(adv, enc)), embed(enc, preprocess(target, enc)))


# -- export -------------------------------------------------------------------


def write_ecdf(curve: ECDFCurve, path: str | Path) -> Path:
    path = Path(path)
    np.savetxt(path, np.column_stack([curve.points, curve.cumulative]), fmt="%.10g",
               header="value cumulative")
    return path


def write_heatmap(grid: HeatmapGrid, path: str | Path) -> Path:
    path = Path(path)
    np.savetxt(path, grid.values, fmt="%.6f")
    return path


def write_table(rows: Iterable[dict], path: str | Path) -> Path:
    rows = list(rows)
    if not rows:
        raise AnalysisError("nothing to write")
    path = Path(path)
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def export_report(
    out_dir: str | Path,
    rows: Sequence[dict],
    curves: dict[str, ECDFCurve] | None = None,
    heatmaps: dict[str, HeatmapGrid] | None = None,
    run_id: str = "run",
) -> list[Path]:
    """Write a results table plus per-image ECDF and heatmap files.

    Files are named ``{run_id}_{image_id}_ecdf.txt`` and ``..._heatmap.txt``.
    """
    if not rows:
        raise AnalysisError("no results to export")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise AnalysisError(f"cannot create {out_dir}: {exc}") from exc
    written = [write_table(rows, out_dir / f"{run_id}_table.csv")]
    for image_id, curve in sorted((curves or {}).items()):
        written.append(write_ecdf(curve, out_dir / f"{run_id}_{image_id}_ecdf.txt"))
    if curves and len(curves) > 1:
        grid, mean, std = ecdf_band(list(curves.values()))
        band = out_dir / f"{run_id}_ecdf_band.txt"
        np.savetxt(band, np.column_stack([grid, mean, std]), fmt="%.10g", header="value mean std")
        written.append(band)
    for image_id, grid in sorted((heatmaps or {}).items()):
        written.append(write_heatmap(grid, out_dir / f"{run_id}_{image_id}_heatmap.txt"))
    return written
