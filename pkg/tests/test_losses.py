import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loce.losses import (
    equilibrium_loss,
    equilibrium_loss_batch,
    margin,
    margin_matrix,
    smooth_l1,
    softmax_ce,
    softmax_ce_batch,
)
from loce.scores import MeanScoreVector, new_tracker


def tracker(scores, sub=0.01):
    return MeanScoreVector(np.asarray(scores, dtype=float), 0.9, sub)


def central_diff(f, z, h=1e-5):
    g = np.zeros_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        g[i] = (f(zp) - f(zm)) / (2 * h)
    return g


def test_ce_uniform_logits():
    r = softmax_ce([0.0, 0.0, 0.0], 0)
    assert r.loss == pytest.approx(math.log(3), rel=1e-15)
    np.testing.assert_allclose(r.gradient, [-2 / 3, 1 / 3, 1 / 3], rtol=1e-15)


def test_ce_confident_correct_keeps_precision():
    # log(1 + 2 e^-10), evaluated with mpmath at 40 digits
    assert softmax_ce([10.0, 0.0, 0.0], 0).loss == pytest.approx(9.079573746724444e-05, rel=1e-13)


def test_ce_confident_wrong():
    # log(1 + e^10), mpmath
    assert softmax_ce([0.0, 10.0], 0).loss == pytest.approx(10.000045398899217, rel=1e-14)


def test_ce_large_logits_stay_finite():
    r = softmax_ce([1000.0, -1000.0, 0.0], 1)
    assert r.loss == pytest.approx(2000.0)
    assert np.all(np.isfinite(r.gradient))


def test_ce_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_ce([0.0, np.nan], 0)
    with pytest.raises(ValueError):
        equilibrium_loss([0.0, np.inf, 0.0], 0, tracker([0.5, 0.5]))


def test_margin_examples():
    s = tracker([0.4, 0.4, 0.1, 0.3, 0.5])
    assert margin(s, 0, 1) == 0.0
    # ln 3 and ln 50 from mpmath
    assert margin(s, 2, 3) == pytest.approx(1.0986122886681098, rel=1e-14)
    assert margin(s, 5, 4) == pytest.approx(3.912023005428146, rel=1e-14)


def test_margin_matrix_matches_pairwise():
    s = tracker([0.2, 0.7, 0.05])
    M = margin_matrix(s)
    for y in range(4):
        for yp in range(4):
            assert M[y, yp] == margin(s, y, yp)


def test_ebl_uniform_scores_reduce_to_ce():
    s = new_tracker(2, init_value=0.01, background_substitute=0.01)
    assert equilibrium_loss([0.0, 0.0, 0.0], 0, s).loss == pytest.approx(math.log(3), rel=1e-15)


def test_ebl_background_margin_example():
    s = tracker([0.5, 0.5])
    # log(1 + 1 + 0.02), mpmath
    assert equilibrium_loss([0.0, 0.0, 0.0], 0, s).loss == pytest.approx(0.7030975114131134, rel=1e-14)


def test_ebl_rejects_length_mismatch():
    with pytest.raises(ValueError):
        equilibrium_loss([0.0, 0.0], 0, tracker([0.5, 0.5]))


def test_ebl_brute_force_sum_form():
    """Direct evaluation of log(1 + sum exp(z_j - z_y + log s_j - log s_y))."""
    rng = np.random.default_rng(3)
    for _ in range(200):
        C = int(rng.integers(1, 8))
        s = tracker(rng.uniform(0.01, 1.0, C))
        z = rng.normal(0, 2, C + 1)
        y = int(rng.integers(0, C + 1))
        v = s.values()
        direct = math.log(1 + sum(math.exp(z[j] - z[y] + math.log(v[j] / v[y])) for j in range(C + 1) if j != y))
        assert equilibrium_loss(z, y, s).loss == pytest.approx(direct, rel=1e-12)


def test_loss_result_gradient_structure():
    rng = np.random.default_rng(4)
    for _ in range(100):
        s = tracker(rng.uniform(0.01, 1.0, 5))
        z = rng.normal(0, 3, 6)
        y = int(rng.integers(0, 6))
        r = equilibrium_loss(z, y, s)
        assert r.loss >= 0
        assert abs(r.gradient.sum()) < 1e-12
        assert r.gradient[y] <= 0
        assert np.all(np.delete(r.gradient, y) >= 0)


def test_ebl_gradient_matches_finite_differences_small():
    rng = np.random.default_rng(5)
    s = tracker(rng.uniform(0.01, 1.0, 4))
    z = rng.normal(0, 2, 5)
    for y in range(5):
        g = central_diff(lambda v: equilibrium_loss(v, y, s).loss, z)
        np.testing.assert_allclose(equilibrium_loss(z, y, s).gradient, g, rtol=1e-6, atol=1e-9)


def test_directionality_weak_positive_costs_more():
    z = np.array([1.0, 0.5, -0.2, 0.0])
    base = equilibrium_loss(z, 0, tracker([0.6, 0.4, 0.3])).loss
    for lowered in (0.3, 0.1, 0.01):
        assert equilibrium_loss(z, 0, tracker([lowered, 0.4, 0.3])).loss > base


@settings(max_examples=300, deadline=None)
@given(
    scores=st.lists(st.floats(1e-4, 1.0), min_size=1, max_size=6),
    y=st.integers(0, 6),
    c=st.sampled_from([1e-3, 0.5, 1.0]),
)
def test_margin_antisymmetry_and_scale_invariance(scores, y, c):
    s = tracker(scores)
    n = len(scores) + 1
    y = y % n
    for yp in range(n):
        assert margin(s, y, yp) == -margin(s, yp, y)
    scaled = MeanScoreVector(np.asarray(scores) * c, 0.9, 0.01 * c)
    z = np.linspace(-1, 1, n)
    a, b = equilibrium_loss(z, y, s), equilibrium_loss(z, y, scaled)
    assert a.loss == pytest.approx(b.loss, rel=1e-10, abs=1e-12)
    np.testing.assert_allclose(a.gradient, b.gradient, atol=1e-10)


def test_batch_matches_single_and_reductions():
    rng = np.random.default_rng(6)
    s = tracker(rng.uniform(0.05, 1.0, 3))
    z = rng.normal(0, 2, (7, 4))
    y = rng.integers(0, 4, 7)
    singles = [equilibrium_loss(z[i], y[i], s) for i in range(7)]
    mean = equilibrium_loss_batch(z, y, s)
    total = equilibrium_loss_batch(z, y, s, reduction="sum")
    assert mean.loss == pytest.approx(np.mean([r.loss for r in singles]), rel=1e-14)
    assert total.loss == pytest.approx(np.sum([r.loss for r in singles]), rel=1e-14)
    np.testing.assert_allclose(mean.gradient * 7, np.stack([r.gradient for r in singles]), rtol=1e-13)
    ce = softmax_ce_batch(z, y, reduction="sum")
    assert ce.loss == pytest.approx(sum(softmax_ce(z[i], y[i]).loss for i in range(7)), rel=1e-14)
    with pytest.raises(ValueError):
        softmax_ce_batch(z, y, reduction="max")


def test_batch_accepts_raw_score_vector():
    s = tracker([0.2, 0.6])
    z = np.array([[0.1, 0.2, 0.3]])
    a = equilibrium_loss_batch(z, [1], s)
    b = equilibrium_loss_batch(z, [1], s.values())
    assert a.loss == b.loss


def test_smooth_l1_values_and_gradient():
    pred = np.array([[0.0, 0.5, 2.0, -3.0]])
    target = np.zeros((1, 4))
    r = smooth_l1(pred, target)
    assert r.loss == pytest.approx(0.0 + 0.125 + 1.5 + 2.5)
    np.testing.assert_allclose(r.gradient, [[0.0, 0.5, 1.0, -1.0]])
    g = central_diff(lambda v: smooth_l1(v.reshape(1, 4), target).loss, np.array([0.3, -0.2, 1.7, -2.4]))
    np.testing.assert_allclose(smooth_l1(np.array([[0.3, -0.2, 1.7, -2.4]]), target).gradient[0], g, rtol=1e-6)
