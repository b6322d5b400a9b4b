import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from petmae.errors import AllBlank, InvalidSpacing, LabelMismatch, ShapeMismatch
from petmae.volume import (
    TARGET_SPACING,
    Channel,
    Volume,
    compute_norm_stats,
    concat_channels,
    crop_blank_boundary,
    random_crop,
    resample_trilinear,
    split_channels,
    zscore_normalize,
)


def brute_trilinear(data, idx):
    """Per-point trilinear interpolation with clamping, written without vectorisation."""
    nz, ny, nx = data.shape
    z, y, x = [min(max(c, 0.0), n - 1.0) for c, n in zip(idx, (nz, ny, nx))]
    z0, y0, x0 = int(np.floor(z)), int(np.floor(y)), int(np.floor(x))
    total = 0.0
    for dz, dy, dx in itertools.product((0, 1), repeat=3):
        zi, yi, xi = min(z0 + dz, nz - 1), min(y0 + dy, ny - 1), min(x0 + dx, nx - 1)
        wz = (z - z0) if dz else (1 - (z - z0))
        wy = (y - y0) if dy else (1 - (y - y0))
        wx = (x - x0) if dx else (1 - (x - x0))
        total += data[zi, yi, xi] * wz * wy * wx
    return total


def brute_resample(v, target):
    shape = [max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(v.shape, v.spacing, target)]
    out = np.empty(shape)
    for j in itertools.product(*[range(m) for m in shape]):
        # centre of output voxel j, in input voxel index units
        idx = [((jj + 0.5) * t - 0.5 * s) / s for jj, t, s in zip(j, target, v.spacing)]
        out[j] = brute_trilinear(v.data[0], idx)
    return out


def ct_with_block():
    data = np.full((6, 6, 6), -1000.0)
    data[0:2, 0:2, 0:2] = 0.0
    return Volume(data, channel_labels=(Channel.CT,))


def test_crop_blank_forced_box():
    ct = ct_with_block()
    pet = Volume(np.arange(216.0).reshape(6, 6, 6), channel_labels=(Channel.PET,))
    out_ct, out_pet = crop_blank_boundary(ct, [pet], -900, 0)
    assert out_ct.shape == (2, 2, 2)
    assert (out_ct.data == 0).all()
    assert np.array_equal(out_pet.data, pet.data[:, :2, :2, :2])


def test_crop_blank_margin_and_origin():
    data = np.full((10, 10, 10), -1000.0)
    data[4:6, 5, 3:7] = 50
    ct = Volume(data, spacing=(3.0, 2.0, 2.0), origin=(1.0, 1.0, 1.0))
    (out,) = crop_blank_boundary(ct, [], -900, 2)
    assert out.shape == (6, 5, 8)
    assert out.origin == (1.0 + 2 * 3.0, 1.0 + 3 * 2.0, 1.0 + 1 * 2.0)


def test_crop_blank_idempotent():
    rng = np.random.default_rng(1)
    data = np.full((12, 10, 9), -1000.0)
    data[3:9, 2:8, 4:7] = rng.normal(40, 10, size=(6, 6, 3))
    (once,) = crop_blank_boundary(Volume(data), [], -900, 0)
    (twice,) = crop_blank_boundary(once, [], -900, 0)
    assert np.array_equal(once.data, twice.data) and once.origin == twice.origin


def test_crop_blank_all_air():
    with pytest.raises(AllBlank):
        crop_blank_boundary(Volume(np.full((4, 4, 4), -1000.0)), [], -900, 2)


def test_crop_blank_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        crop_blank_boundary(ct_with_block(), [Volume(np.zeros((5, 6, 6)))])


def test_resample_identity_exact():
    rng = np.random.default_rng(2)
    v = Volume(rng.normal(size=(2, 7, 5, 6)), spacing=(3.0, 2.0, 2.0), origin=(1.0, 2.0, 3.0))
    out = resample_trilinear(v, (3.0, 2.0, 2.0))
    assert out.shape == v.shape
    assert np.abs(out.data - v.data).max() == 0.0
    assert out.origin == v.origin


def test_resample_ramp_matches_brute_force():
    ramp = np.tile(np.arange(8.0), (1, 1, 1)).reshape(1, 1, 8)
    v = Volume(ramp, spacing=(1.0, 1.0, 1.0))
    out = resample_trilinear(v, (1.0, 1.0, 2.0))
    assert out.shape == (1, 1, 4)
    np.testing.assert_array_equal(out.data[0, 0, 0], [0.5, 2.5, 4.5, 6.5])
    np.testing.assert_allclose(out.data[0], brute_resample(v, (1.0, 1.0, 2.0)), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 8)] * 3),
    spacing=st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0])] * 3),
    target=st.tuples(*[st.sampled_from([0.7, 1.0, 2.0, 2.5, 3.0])] * 3),
    seed=st.integers(0, 2**16),
)
def test_resample_matches_brute_force(shape, spacing, target, seed):
    data = np.random.default_rng(seed).normal(size=shape)
    v = Volume(data, spacing=spacing)
    out = resample_trilinear(v, target)
    np.testing.assert_allclose(out.data[0], brute_resample(v, target), rtol=0, atol=1e-12)
    # physical extent preserved within one output voxel per axis
    ext_in = np.array(shape) * np.array(spacing)
    ext_out = np.array(out.shape) * np.array(target)
    assert (np.abs(ext_in - ext_out) <= np.array(target) / 2 + 1e-9).all() or min(out.shape) == 1


def test_resample_default_target_and_invalid():
    assert TARGET_SPACING == (3.0, 2.0, 2.0)
    v = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(InvalidSpacing):
        resample_trilinear(v, (0.0, 1.0, 1.0))
    with pytest.raises(InvalidSpacing):
        resample_trilinear(v, (np.nan, 1.0, 1.0))


def test_norm_stats_cases():
    st7 = compute_norm_stats(Volume(np.full((2, 2, 2), 7.0)))
    assert (st7.mu, st7.sigma) == (7.0, 0.0)
    st02 = compute_norm_stats(Volume(np.array([0.0, 2.0]).reshape(1, 1, 2)))
    assert (st02.mu, st02.sigma) == (1.0, 1.0)
    sym = compute_norm_stats(Volume(np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 2, 2)))
    assert (sym.mu, sym.sigma) == (0.0, 1.0)


def test_zscore_cases():
    assert (zscore_normalize(Volume(np.full((2, 3, 2), 5.0))).data == 0).all()
    out = zscore_normalize(Volume(np.array([0.0, 2.0]).reshape(1, 1, 2)))
    assert out.data.ravel().tolist() == [-1.0, 1.0]


def test_zscore_per_channel_and_idempotent():
    rng = np.random.default_rng(3)
    data = np.stack([rng.normal(-500, 300, (6, 7, 8)), rng.gamma(2.0, 1.5, (6, 7, 8))])
    v = Volume(data, channel_labels=(Channel.CT, Channel.PET))
    out = zscore_normalize(v)
    for c in range(2):
        assert abs(out.data[c].mean()) <= 1e-6 * np.abs(data[c]).max()
        assert abs(out.data[c].std() - 1.0) <= 1e-12
    again = zscore_normalize(out)
    assert np.abs(again.data - out.data).max() <= 1e-6
    assert out.channel_labels == v.channel_labels


def test_concat_and_split():
    rng = np.random.default_rng(4)
    ct = Volume(rng.normal(size=(4, 4, 4)), channel_labels=(Channel.CT,))
    pet = Volume(rng.normal(size=(4, 4, 4)), channel_labels=(Channel.PET,))
    x = concat_channels(ct, pet)
    assert x.data.shape == (2, 4, 4, 4)
    a, b = split_channels(x)
    assert a.data.tobytes() == ct.data.tobytes() and b.data.tobytes() == pet.data.tobytes()
    with pytest.raises(ShapeMismatch):
        concat_channels(ct, Volume(np.zeros((4, 4, 5)), channel_labels=(Channel.PET,)))
    with pytest.raises(LabelMismatch):
        concat_channels(pet, ct)


def test_random_crop_paper_scale():
    v = Volume(np.zeros((1, 200, 235, 251), dtype=np.float32))
    out = random_crop(v, (96, 128, 128), np.random.default_rng(0))
    assert out.shape == (96, 128, 128)


def test_random_crop_identity_and_determinism():
    rng = np.random.default_rng(5)
    v = Volume(rng.normal(size=(2, 6, 7, 8)), spacing=(3.0, 2.0, 2.0))
    same = random_crop(v, (6, 7, 8), np.random.default_rng(1))
    assert np.array_equal(same.data, v.data) and same.origin == v.origin
    a = random_crop(v, (3, 4, 5), np.random.default_rng(9))
    b = random_crop(v, (3, 4, 5), np.random.default_rng(9))
    assert np.array_equal(a.data, b.data) and a.origin == b.origin
    # origin bookkeeping: voxel (0,0,0) of the crop sits at origin + offset * spacing
    offset = [int(round((o - p) / s)) for o, p, s in zip(a.origin, v.origin, v.spacing)]
    assert np.array_equal(a.data, v.data[:, offset[0] : offset[0] + 3, offset[1] : offset[1] + 4, offset[2] : offset[2] + 5])


def test_random_crop_pads_small_volumes():
    v = Volume(np.ones((1, 2, 3, 4)))
    out = random_crop(v, (4, 3, 6), np.random.default_rng(0))
    assert out.shape == (4, 3, 6)
    assert out.data.sum() == 24 and out.data[0, 0].sum() == 0 and out.data[0, 3].sum() == 0
