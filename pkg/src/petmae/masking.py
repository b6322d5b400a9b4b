"""Patch-grid masking and image-space imputation for the masked autoencoder.

CT and PET are masked independently at patch granularity.  Masked voxels are
filled with zero (the mean of z-scored data); :func:`impute_token` keeps the
learnable-constant alternative available for ablations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autonet import Tensor, _node, as_tensor
from .errors import NonDivisible, ShapeMismatch

DEFAULT_PATCH = (12, 16, 16)
DEFAULT_RATIO = 0.5
N_MASK_CHANNELS = 2


@dataclass(frozen=True)
class PatchGrid:
    crop_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(c // p for c, p in zip(self.crop_shape, self.patch_shape))

    @property
    def total(self) -> int:
        nz, ny, nx = self.counts
        return nz * ny * nx

    @property
    def patch_volume(self) -> int:
        pz, py, px = self.patch_shape
        return pz * py * px


@dataclass(frozen=True)
class PatchMask:
    bits: np.ndarray  # (channels, P) bool
    ratio: float
    seed: int

    def count(self, channel: int) -> int:
        return int(self.bits[channel].sum())


def make_grid(crop_shape, patch_shape=DEFAULT_PATCH) -> PatchGrid:
    crop = tuple(int(c) for c in crop_shape)
    patch = tuple(int(p) for p in patch_shape)
    if len(crop) != 3 or len(patch) != 3 or min(crop + patch) < 1:
        raise ValueError(f"shapes must be positive triples: {crop_shape}, {patch_shape}")
    if any(c % p for c, p in zip(crop, patch)):
        raise NonDivisible(f"patch {patch} does not tile crop {crop}")
    return PatchGrid(crop, patch)


def masked_count(grid: PatchGrid, ratio: float) -> int:
    return int(np.floor(ratio * grid.total + 0.5))


def sample_mask(grid: PatchGrid, ratio: float = DEFAULT_RATIO, seed: int = 0, channels: int = N_MASK_CHANNELS) -> PatchMask:
    """Mask exactly ``round(ratio * P)`` distinct patches in each channel.

    Channel ``c`` draws from its own generator seeded with ``[seed, c]``, so the
    channels are independent and each draw is reproducible on its own.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    k = masked_count(grid, ratio)
    bits = np.zeros((channels, grid.total), dtype=bool)
    for c in range(channels):
        rng = np.random.default_rng([seed, c])
        bits[c, rng.choice(grid.total, size=k, replace=False)] = True
    return PatchMask(bits, float(ratio), int(seed))


def expand_mask(mask: PatchMask, grid: PatchGrid) -> np.ndarray:
    """Voxel mask ``(channels, Z, Y, X)`` of 0/1 float64, 1 on masked voxels."""
    if mask.bits.shape[1] != grid.total:
        raise ShapeMismatch(f"mask has {mask.bits.shape[1]} patches, grid has {grid.total}")
    pz, py, px = grid.patch_shape
    m = mask.bits.reshape((-1,) + grid.counts)
    m = m.repeat(pz, axis=1).repeat(py, axis=2).repeat(px, axis=3)
    return m.astype(np.float64)


def impute_zero(x, mask):
    """``x * (1 - M)`` with masked voxels set to +0.0. Accepts arrays or tensors."""
    if isinstance(x, Tensor):
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != x.shape:
            raise ShapeMismatch(f"impute_zero: x {x.shape} vs mask {m.shape}")
        keep = 1.0 - m
        return _node(np.where(m > 0, 0.0, x.value), (x,), lambda g: (g * keep,))
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(mask)
    if m.shape != x.shape:
        raise ShapeMismatch(f"impute_zero: x {x.shape} vs mask {m.shape}")
    return np.where(m > 0, 0.0, x)


def impute_token(x, mask, tokens) -> Tensor:
    """``x * (1 - M) + token_c * M`` with a per-channel token.

    ``x`` and ``mask`` are ``[..., C, Z, Y, X]`` with the channel axis at -4;
    ``tokens`` has shape ``(C,)`` and may be a trainable tensor.
    """
    x, tokens = as_tensor(x), as_tensor(tokens)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape or x.value.ndim < 4 or tokens.shape != (x.shape[-4],):
        raise ShapeMismatch(f"impute_token: x {x.shape}, mask {m.shape}, tokens {tokens.shape}")
    tok = tokens.value.reshape((-1, 1, 1, 1))
    keep = 1.0 - m
    out = np.where(m > 0, 0.0, x.value) + tok * m
    reduce_axes = tuple(a for a in range(m.ndim) if a != m.ndim - 4)

    def back(g):
        return g * keep, (g * m).sum(axis=reduce_axes)

    return _node(out, (x, tokens), back)


def patch_border(grid: PatchGrid) -> np.ndarray:
    """Boolean ``(Z, Y, X)`` map of voxels on the faces of their patch."""
    out = np.zeros(grid.crop_shape, dtype=bool)
    for axis, p in enumerate(grid.patch_shape):
        idx = np.arange(grid.crop_shape[axis]) % p
        face = (idx == 0) | (idx == p - 1)
        shape = [1, 1, 1]
        shape[axis] = -1
        out |= face.reshape(shape)
    return out
