import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loce.scores import MeanScoreVector, frequency_indicator, new_tracker


def test_new_tracker_fills_foreground_and_substitutes_background():
    t = new_tracker(3, alpha=0.9, background_substitute=0.01, init_value=0.5)
    np.testing.assert_array_equal(t.scores, [0.5, 0.5, 0.5])
    assert t[3] == 0.01
    np.testing.assert_array_equal(t.values(), [0.5, 0.5, 0.5, 0.01])


def test_new_tracker_identity_case():
    t = new_tracker(1, alpha=0.0, background_substitute=0.01, init_value=1.0)
    np.testing.assert_array_equal(t.scores, [1.0])


def test_default_init_is_uniform_softmax_score():
    t = new_tracker(50)
    np.testing.assert_allclose(t.scores, 1 / 51)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(alpha=1.5),
        dict(alpha=1.0),
        dict(alpha=-0.1),
        dict(alpha=float("nan")),
        dict(background_substitute=0.0),
        dict(background_substitute=1.5),
        dict(init_value=0.0),
        dict(init_value=float("inf")),
    ],
)
def test_new_tracker_rejects_bad_parameters(kwargs):
    params = dict(alpha=0.9, background_substitute=0.01, init_value=0.5) | kwargs
    with pytest.raises(ValueError):
        new_tracker(2, **params)


def test_update_ema_arithmetic():
    t = new_tracker(2, alpha=0.9, init_value=0.5)
    t.update(0, 0.7)
    # 0.9 * 0.5 + 0.1 * 0.7
    assert t.scores[0] == pytest.approx(0.52, abs=1e-15)
    assert t.scores[1] == 0.5


def test_update_fixed_point():
    t = new_tracker(2, alpha=0.9, init_value=0.3)
    t.update(1, 0.3)
    assert t.scores[1] == pytest.approx(0.3, abs=1e-16)


def test_update_alpha_zero_replaces():
    t = new_tracker(2, alpha=0.0, init_value=0.5)
    t.update(0, 0.9)
    assert t.scores[0] == 0.9


def test_update_rejects_background_and_bad_probability():
    t = new_tracker(2)
    with pytest.raises(ValueError):
        t.update(2, 0.5)
    with pytest.raises(ValueError):
        t.update(0, 1.2)
    with pytest.raises(ValueError):
        t.update(0, -0.01)


def test_convergence_is_geometric_in_exact_arithmetic():
    alpha, s0, p = Fraction(9, 10), Fraction(1, 2), Fraction(1, 5)
    s = s0
    for n in range(1, 12):
        s = alpha * s + (1 - alpha) * p
        assert abs(s - p) == alpha**n * abs(s0 - p)
    t = new_tracker(1, alpha=0.9, init_value=0.5)
    for _ in range(11):
        t.update(0, 0.2)
    assert t.scores[0] == pytest.approx(float(s), rel=1e-13)


@settings(max_examples=200, deadline=None)
@given(
    alpha=st.floats(0.0, 0.999),
    init=st.floats(1e-6, 1.0),
    stream=st.lists(st.tuples(st.integers(0, 3), st.floats(0.0, 1.0)), max_size=60),
)
def test_boundedness_and_background_immutability(alpha, init, stream):
    t = new_tracker(4, alpha=alpha, background_substitute=0.01, init_value=init)
    for label, p in stream:
        t.update(label, p)
        assert np.all(t.scores > 0) and np.all(t.scores <= 1)
        assert t[4] == 0.01
        assert t.values()[-1] == 0.01


def test_update_order_matters():
    a = new_tracker(1, alpha=0.5, init_value=0.5)
    b = new_tracker(1, alpha=0.5, init_value=0.5)
    a.update_many([0, 0], [0.1, 0.9])
    b.update_many([0, 0], [0.9, 0.1])
    assert a.scores[0] != b.scores[0]


def test_frequency_indicator_normalizes_counts():
    ind = frequency_indicator([100, 10, 1])
    np.testing.assert_allclose(ind.scores, [100 / 111, 10 / 111, 1 / 111], rtol=1e-15)
    uniform = frequency_indicator([10, 10, 10])
    np.testing.assert_allclose(uniform.scores, 1 / 3)
    assert ind.frozen
    ind.update(0, 0.0)
    np.testing.assert_allclose(ind.scores, [100 / 111, 10 / 111, 1 / 111], rtol=1e-15)


def test_frequency_indicator_rejects_zero_counts():
    with pytest.raises(ValueError):
        frequency_indicator([0, 5])


def test_text_snapshot_round_trip():
    t = new_tracker(3, alpha=0.9, background_substitute=0.01)
    t.update_many([0, 1, 1, 2], [0.3, 0.9, 0.8, 0.123456789])
    back = MeanScoreVector.from_text(t.to_text())
    np.testing.assert_array_equal(back.scores, t.scores)
    assert back.alpha == t.alpha and back.background_substitute == t.background_substitute


def test_text_snapshot_reports_bad_line():
    with pytest.raises(ValueError, match="line 2"):
        MeanScoreVector.from_text("alpha=0.9\nnonsense\n")


def test_underflow_is_clamped_positive():
    t = MeanScoreVector(np.array([5e-324]), alpha=0.5, background_substitute=0.01)
    t.update(0, 0.0)
    assert t.scores[0] > 0 and math.isfinite(math.log(t.scores[0]))
