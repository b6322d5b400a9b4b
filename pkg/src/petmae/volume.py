"""Multi-channel 3D volumes and the harmonization operations.

Axis convention: data is indexed ``[channel, z, y, x]`` and every spatial
triple (shape, spacing, origin, offsets) is ordered ``(z, y, x)``.  The
NIfTI ``pixdim`` order and the CLI ``--spacing`` flag use ``(x, y, z)``;
conversion happens at those boundaries only.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AllBlank, InvalidSpacing, LabelMismatch, ShapeMismatch

# Harmonized voxel spacing, 2.0 x 2.0 x 3.0 mm (x, y, z) -> (z, y, x).
TARGET_SPACING = (3.0, 2.0, 2.0)
DEFAULT_BLANK_THRESHOLD_HU = -900.0
DEFAULT_BLANK_MARGIN = 2
NORM_EPSILON = 1e-8


class Channel(str, enum.Enum):
    CT = "CT"
    PET = "PET"
    GENERIC = "GENERIC"


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    channel_labels: tuple[Channel, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeMismatch(f"volume data must be 3D or 4D, got ndim={data.ndim}")
        if min(data.shape) < 1:
            raise ShapeMismatch(f"all extents must be >= 1, got {data.shape}")
        object.__setattr__(self, "data", data)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidSpacing(f"spacing must be three positive finite values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        labels = tuple(Channel(c) for c in self.channel_labels) or (Channel.GENERIC,) * data.shape[0]
        if len(labels) != data.shape[0]:
            raise LabelMismatch(f"{len(labels)} labels for {data.shape[0]} channels")
        object.__setattr__(self, "channel_labels", labels)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def channel(self, c: int) -> "Volume":
        return Volume(self.data[c : c + 1].copy(), self.spacing, self.origin, (self.channel_labels[c],))

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)

    def physical_extent(self) -> np.ndarray:
        return np.asarray(self.shape) * np.asarray(self.spacing)


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float
    epsilon: float = NORM_EPSILON


def _check_aligned(ref: Volume, other: Volume) -> None:
    if ref.shape != other.shape or not np.allclose(ref.spacing, other.spacing):
        raise ShapeMismatch(
            f"volumes not voxel-aligned: {ref.shape}@{ref.spacing} vs {other.shape}@{other.spacing}"
        )


def _shift_origin(v: Volume, offset) -> tuple[float, float, float]:
    return tuple(o + k * s for o, k, s in zip(v.origin, offset, v.spacing))


def crop_box(v: Volume, start, stop) -> Volume:
    """Crop all channels to ``[start, stop)`` per axis, keeping physical placement."""
    sl = (slice(None),) + tuple(slice(a, b) for a, b in zip(start, stop))
    return v.with_data(v.data[sl].copy(), origin=_shift_origin(v, start))


def crop_blank_boundary(
    ct: Volume,
    companions=(),
    threshold_hu: float = DEFAULT_BLANK_THRESHOLD_HU,
    margin_voxels: int = DEFAULT_BLANK_MARGIN,
) -> list[Volume]:
    """Crop ``ct`` and every companion to the CT body bounding box.

    Returns ``[ct_cropped, *companions_cropped]``.
    """
    for comp in companions:
        _check_aligned(ct, comp)
    body = (ct.data > threshold_hu).any(axis=0)
    if not body.any():
        raise AllBlank(f"no CT voxel exceeds {threshold_hu} HU")
    start, stop = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(body.any(axis=other))
        start.append(max(0, int(idx[0]) - margin_voxels))
        stop.append(min(body.shape[axis], int(idx[-1]) + 1 + margin_voxels))
    return [crop_box(v, start, stop) for v in (ct, *companions)]


def _axis_weights(idx: np.ndarray, n: int):
    """Clamped floor index, ceil index and fractional weight along one axis."""
    idx = np.clip(idx, 0.0, n - 1.0)
    lo = np.floor(idx).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, idx - lo


def trilinear_sample(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``data[c, z, y, x]`` at fractional voxel coordinates.

    ``coords`` has shape ``(3, ...)`` (z, y, x index space).  Coordinates
    outside the grid are clamped to the border voxel.  Returns ``(C, ...)``.
    """
    _, nz, ny, nx = data.shape
    z0, z1, fz = _axis_weights(coords[0], nz)
    y0, y1, fy = _axis_weights(coords[1], ny)
    x0, x1, fx = _axis_weights(coords[2], nx)
    out = 0.0
    for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                out = out + data[:, zi, yi, xi] * (wz * wy * wx)
    return out


def _separable_sample(data: np.ndarray, axis_coords) -> np.ndarray:
    """Trilinear resampling on a separable grid, one axis at a time."""
    out = data
    for axis, idx in enumerate(axis_coords, start=1):
        lo, hi, frac = _axis_weights(idx, out.shape[axis])
        shape = [1] * out.ndim
        shape[axis] = -1
        frac = frac.reshape(shape)
        out = np.take(out, lo, axis=axis) * (1.0 - frac) + np.take(out, hi, axis=axis) * frac
    return out


def resample_trilinear(v: Volume, target_spacing=TARGET_SPACING) -> Volume:
    """Resample to ``target_spacing`` (z, y, x) mm, preserving physical extent.

    The first output voxel edge is aligned with the first input voxel edge, so
    output centre ``j`` maps to input index ``(j + 0.5) * r - 0.5`` with
    ``r = out_spacing / in_spacing``.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(math.isfinite(s) and s > 0 for s in target):
        raise InvalidSpacing(f"invalid target spacing {target_spacing}")
    shape_out, axis_coords, origin = [], [], []
    for n, s_in, s_out, o in zip(v.shape, v.spacing, target, v.origin):
        m = max(1, int(math.floor(n * s_in / s_out + 0.5)))
        r = s_out / s_in
        shape_out.append(m)
        axis_coords.append((np.arange(m) + 0.5) * r - 0.5)
        origin.append(o + (0.5 * r - 0.5) * s_in)
    data = _separable_sample(v.data.astype(np.float64, copy=False), axis_coords)
    return Volume(data, target, tuple(origin), v.channel_labels)


def compute_norm_stats(v: Volume, channel: int = 0) -> NormStats:
    x = v.data[channel].astype(np.float64, copy=False)
    mu = float(x.mean())
    return NormStats(mu=mu, sigma=float(np.sqrt(np.mean((x - mu) ** 2))))


def zscore_normalize(v: Volume) -> Volume:
    """Per-channel ``(x - mu) / max(sigma, 1e-8)`` with population sigma."""
    out = np.empty(v.data.shape, dtype=np.float64)
    for c in range(v.channels):
        st = compute_norm_stats(v, c)
        out[c] = (v.data[c] - st.mu) / max(st.sigma, st.epsilon)
    return v.with_data(out)


def concat_channels(ct: Volume, pet: Volume) -> Volume:
    if ct.channels != 1 or pet.channels != 1:
        raise ShapeMismatch("concat_channels expects single-channel CT and PET volumes")
    if ct.channel_labels[0] is not Channel.CT or pet.channel_labels[0] is not Channel.PET:
        raise LabelMismatch(
            f"expected (CT, PET) labels, got ({ct.channel_labels[0].value}, {pet.channel_labels[0].value})"
        )
    _check_aligned(ct, pet)
    data = np.concatenate([ct.data, pet.data], axis=0)
    return Volume(data, ct.spacing, ct.origin, (Channel.CT, Channel.PET))


def split_channels(v: Volume) -> list[Volume]:
    return [v.channel(c) for c in range(v.channels)]


def pad_to_shape(v: Volume, shape) -> Volume:
    """Symmetric zero padding up to at least ``shape``; origin moves outward."""
    pads = [max(0, int(t) - n) for t, n in zip(shape, v.shape)]
    if not any(pads):
        return v
    before = [p // 2 for p in pads]
    width = [(0, 0)] + [(b, p - b) for b, p in zip(before, pads)]
    data = np.pad(v.data, width)
    return v.with_data(data, origin=_shift_origin(v, [-b for b in before]))


def random_crop(v: Volume, crop_shape, rng: np.random.Generator) -> Volume:
    """Uniformly placed crop of ``crop_shape``; smaller volumes are zero-padded first."""
    v = pad_to_shape(v, crop_shape)
    start = [int(rng.integers(0, n - c + 1)) for n, c in zip(v.shape, crop_shape)]
    stop = [s + int(c) for s, c in zip(start, crop_shape)]
    return crop_box(v, start, stop)
