import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from petmae.autonet import Tensor, backward
from petmae.errors import ShapeMismatch
from petmae.losses import DEFAULT_LAMBDA, dice_ce_loss, dice_ce_terms, recon_loss


def test_perfect_reconstruction_is_zero():
    x = np.random.default_rng(0).normal(size=(1, 2, 2, 2, 2))
    m = np.zeros_like(x)
    m[:, 0] = 1
    assert recon_loss(x.copy(), x, m).total == 0.0


def test_hand_case():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    r = np.array([0.0, 0.0, 3.0, 5.0])
    m = np.array([1.0, 1.0, 0.0, 0.0])
    b = recon_loss(r, x, m, lam=0.2, epsilon=0.0)
    assert b.masked_term == 2.5 and b.visible_term == 0.5
    assert abs(b.total - 2.6) <= 1e-12 * 2.6


def test_default_lambda():
    assert DEFAULT_LAMBDA == 0.2
    assert recon_loss(np.zeros(2), np.ones(2), np.ones(2)).lam == 0.2


def test_all_masked_reduces_to_mse():
    rng = np.random.default_rng(1)
    x, r = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    b = recon_loss(r, x, np.ones_like(x))
    mse = ((r - x) ** 2).sum() / (x.size + 1e-8)
    assert b.visible_term == 0.0
    assert abs(b.total - mse) <= 1e-12 * mse
    assert abs(b.total - ((r - x) ** 2).mean()) <= 1e-12 * b.total * 1e3


def test_breakdown_invariant_and_shape_error():
    rng = np.random.default_rng(2)
    x, r = rng.normal(size=30), rng.normal(size=30)
    m = (rng.random(30) > 0.4).astype(float)
    b = recon_loss(r, x, m, lam=0.25)
    assert abs(b.total - (b.masked_term + 0.25 * b.visible_term)) <= 1e-12 * b.total
    with pytest.raises(ShapeMismatch):
        recon_loss(r, x[:-1], m[:-1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40))
def test_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    x, r = rng.normal(size=n), rng.normal(size=n)
    m = (rng.random(n) > 0.5).astype(float)
    perm = rng.permutation(n)
    a = recon_loss(r, x, m).total
    b = recon_loss(r[perm], x[perm], m[perm]).total
    assert abs(a - b) <= 1e-12 * max(abs(a), 1e-300)


def test_recon_gradient_closed_form_and_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 3, 3, 3))
    m = (rng.random(x.shape) > 0.5).astype(float)
    r = Tensor(rng.normal(size=x.shape), requires_grad=True)
    backward(recon_loss(r, x, m).node)
    d = r.value - x
    expected = np.where(m > 0, 2 * d / (m.sum() + 1e-8), 2 * 0.2 * d / ((1 - m).sum() + 1e-8))
    np.testing.assert_allclose(r.grad, expected, rtol=1e-12)
    h = 1e-5
    for idx in [(0, 0, 0, 0, 0), (0, 1, 2, 1, 0), (0, 0, 1, 2, 2)]:
        v = r.value.copy()
        v[idx] += h
        up = recon_loss(v, x, m).total
        v[idx] -= 2 * h
        dn = recon_loss(v, x, m).total
        fd = (up - dn) / (2 * h)
        assert abs(fd - r.grad[idx]) <= 1e-4 * abs(fd)


def test_dice_ce_saturated_correct():
    labels = np.zeros((1, 4, 4, 4))
    labels[0, :2] = 1
    logits = np.stack([np.where(labels > 0, -5.0, 5.0), np.where(labels > 0, 5.0, -5.0)], axis=1)
    assert float(dice_ce_loss(logits, labels).value) <= 1e-3


def test_dice_ce_uniform_logits_ce_is_ln2():
    labels = np.zeros((1, 2, 2, 2))
    labels[0, 0] = 1
    _, ce = dice_ce_terms(np.zeros((1, 2, 2, 2, 2)), labels)
    assert abs(ce - math.log(2)) <= 1e-9


def test_dice_term_single_voxel_scalar_oracle():
    p, g, s = 0.8, 1.0, 1e-5
    oracle = 1.0 - (2 * p * g + s) / (p + g + s)
    z = math.log(p / (1 - p))
    logits = np.array([0.0, z]).reshape(1, 2, 1, 1, 1)
    dice_term, ce = dice_ce_terms(logits, np.ones((1, 1, 1, 1)))
    assert abs(dice_term - oracle) <= 1e-12
    assert abs(ce + math.log(p)) <= 1e-12


def test_dice_ce_gradient_fd():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.normal(size=(2, 2, 3, 3, 2)), requires_grad=True)
    labels = (rng.random((2, 3, 3, 2)) > 0.6).astype(float)
    backward(dice_ce_loss(logits, labels))
    h = 1e-5
    for idx in [(0, 0, 0, 0, 0), (1, 1, 2, 1, 1), (0, 1, 1, 2, 0), (1, 0, 0, 2, 1)]:
        v = logits.value.copy()
        v[idx] += h
        up = float(dice_ce_loss(v, labels).value)
        v[idx] -= 2 * h
        dn = float(dice_ce_loss(v, labels).value)
        fd = (up - dn) / (2 * h)
        assert abs(fd - logits.grad[idx]) <= 1e-4 * max(abs(fd), 1e-8)


def test_dice_ce_monotone_in_true_foreground_probability():
    labels = np.zeros((1, 1, 2, 3))
    labels[0, 0, 0] = 1
    prev = None
    for z in np.linspace(-4, 4, 17):
        logits = np.zeros((1, 2, 1, 2, 3))
        logits[0, 1][labels[0] > 0] = z
        val = float(dice_ce_loss(logits, labels).value)
        assert val >= 0
        if prev is not None:
            assert val < prev
        prev = val
