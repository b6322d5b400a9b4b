"""Sliding-window inference with uniform overlap blending."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autonet import Tensor
from .errors import BadOverlap, ShapeMismatch
from .volume import Volume, pad_to_shape

DEFAULT_OVERLAP = 0.5


@dataclass(frozen=True)
class WindowPlan:
    vol_shape: tuple[int, int, int]
    window: tuple[int, int, int]
    stride: tuple[int, int, int]
    corners: tuple[tuple[int, int, int], ...]

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.vol_shape, dtype=np.int64)
        for corner in self.corners:
            count[tuple(slice(c, c + w) for c, w in zip(corner, self.window))] += 1
        return count


def _axis_corners(n: int, w: int, stride: int) -> list[int]:
    if n <= w:
        return [0]
    corners = list(range(0, n - w + 1, stride))
    if corners[-1] != n - w:
        corners.append(n - w)
    return corners


def plan_windows(vol_shape, window, overlap: float = DEFAULT_OVERLAP) -> WindowPlan:
    """Window corners covering ``vol_shape``; the last window per axis ends at the border.

    Axes shorter than the window get a single corner at 0 (the volume is
    zero-padded up to the window before inference).
    """
    if not 0.0 <= overlap < 1.0:
        raise BadOverlap(f"overlap {overlap} not in [0, 1)")
    vol_shape = tuple(max(int(n), int(w)) for n, w in zip(vol_shape, window))
    window = tuple(int(w) for w in window)
    stride = tuple(max(1, int(math.floor(w * (1.0 - overlap)))) for w in window)
    axes = [_axis_corners(n, w, s) for n, w, s in zip(vol_shape, window, stride)]
    return WindowPlan(vol_shape, window, stride, tuple(itertools.product(*axes)))


def _run(model, crop: np.ndarray) -> np.ndarray:
    out = model(crop[None])
    out = out.value if isinstance(out, Tensor) else np.asarray(out)
    return out[0]


def sliding_infer(model, volume: Volume, window=None, overlap: float = DEFAULT_OVERLAP, plan: WindowPlan | None = None) -> Volume:
    """Blend per-window model outputs by uniform voxel-wise averaging.

    ``model`` maps a ``[1, C, z, y, x]`` array to a ``[1, C', z, y, x]`` array or
    tensor.  Windows are accumulated in lexicographic corner order.
    """
    if plan is None:
        if window is None:
            raise ValueError("need a window shape or a plan")
        plan = plan_windows(volume.shape, window, overlap)
    padded = pad_to_shape(volume, plan.window)
    if padded.shape != plan.vol_shape:
        raise ShapeMismatch(f"plan covers {plan.vol_shape}, volume is {padded.shape}")
    mean = None
    count = np.zeros(plan.vol_shape, dtype=np.float64)
    for corner in plan.corners:
        sl = tuple(slice(c, c + w) for c, w in zip(corner, plan.window))
        out = _run(model, padded.data[(slice(None),) + sl])
        if out.shape[1:] != plan.window:
            raise ShapeMismatch(f"model output {out.shape} does not match window {plan.window}")
        if mean is None:
            mean = np.zeros((out.shape[0],) + plan.vol_shape, dtype=np.float64)
        # Running mean: equal to sum / count, and exact when windows agree.
        count[sl] += 1.0
        region = (slice(None),) + sl
        mean[region] += (out - mean[region]) / count[sl]
    blended = mean
    # Undo the symmetric padding.
    before = [(p - n) // 2 for p, n in zip(plan.vol_shape, volume.shape)]
    crop = (slice(None),) + tuple(slice(b, b + n) for b, n in zip(before, volume.shape))
    return Volume(blended[crop], volume.spacing, volume.origin)


def segment(model, volume: Volume, window, overlap: float = DEFAULT_OVERLAP) -> np.ndarray:
    """Binary foreground mask from two-class logits (argmax, ties to background)."""
    logits = sliding_infer(model, volume, window, overlap).data
    return logits[1] > logits[0]
