"""Dice overlap and 95th-percentile Hausdorff distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeMismatch

_TIE_CANDIDATES = 32


@dataclass(frozen=True)
class SegScore:
    dice: float
    hd95_mm: float
    n_pred: int
    n_ref: int


def _pair(pred, ref):
    p = np.asarray(pred).astype(bool)
    r = np.asarray(ref).astype(bool)
    if p.shape != r.shape:
        raise ShapeMismatch(f"mask shapes differ: {p.shape} vs {r.shape}")
    return p, r


def dice(pred, ref) -> float:
    p, r = _pair(pred, ref)
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & r).sum()) / total


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour; outside the grid counts as background."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[(slice(1, -1),) * m.ndim]
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance (mm) from every ``src`` point to its nearest ``dst`` point."""
    tree = cKDTree(dst * spacing)
    k = min(len(dst), _TIE_CANDIDATES)
    _, idx = tree.query(src * spacing, k=k)
    idx = idx.reshape(len(src), k)
    # Recompute from integer offsets and take the minimum over near-ties so the
    # result does not depend on the tree's floating-point arithmetic.
    delta = (src[:, None, :] - dst[idx]) * spacing
    return np.sqrt((delta**2).sum(axis=2)).min(axis=1)


def nearest_rank_p95(d: np.ndarray) -> float:
    d = np.sort(d)
    rank = (95 * len(d) + 99) // 100  # ceil(0.95 n) in exact integer arithmetic
    return float(d[rank - 1])


def hd95(pred, ref, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric HD95 in mm: max of the two directed nearest-rank 95th percentiles.

    Both masks empty gives 0; exactly one empty gives the physical diagonal
    of the grid.
    """
    p, r = _pair(pred, ref)
    spacing = np.asarray(spacing, dtype=np.float64)
    has_p, has_r = p.any(), r.any()
    if not has_p and not has_r:
        return 0.0
    if has_p != has_r:
        return empty_sentinel(p.shape, spacing)
    sp = np.argwhere(surface_voxels(p))
    sr = np.argwhere(surface_voxels(r))
    return max(nearest_rank_p95(_directed(sp, sr, spacing)), nearest_rank_p95(_directed(sr, sp, spacing)))


def empty_sentinel(shape, spacing) -> float:
    ext = np.asarray(shape, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    return float(np.sqrt((ext**2).sum()))


def score(pred, ref, spacing=(1.0, 1.0, 1.0)) -> SegScore:
    p, r = _pair(pred, ref)
    return SegScore(dice(p, r), hd95(p, r, spacing), int(p.sum()), int(r.sum()))
