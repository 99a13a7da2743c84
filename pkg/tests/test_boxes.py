import itertools
import math

import numpy as np
import pytest
from shapely.geometry import box as shapely_box

from loce.boxes import (
    Box,
    JitterSample,
    RegressionTarget,
    clip_box,
    decode_array,
    decode_target,
    encode_array,
    encode_target,
    generate_box,
    generate_proposals,
    iou,
    iou_array,
    jitter_array,
)

GT = Box(0.0, 0.0, 6.0, 6.0)


def shapely_iou(a, b):
    pa, pb = shapely_box(*a), shapely_box(*b)
    return pa.intersection(pb).area / pa.union(pb).area


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        Box(1.0, 0.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        Box(0.0, 0.0, 1.0, float("nan"))


def test_zero_jitter_is_identity():
    b = generate_box(GT, JitterSample((0, 0, 0, 0), (1, -1, 1, -1)))
    assert b == GT
    assert iou(b, GT) == 1.0


def test_extreme_shrink():
    b = generate_box(GT, JitterSample((1, 1, 1, 1), (1, 1, -1, -1)))
    assert b == Box(1.0, 1.0, 5.0, 5.0)
    assert iou(b, GT) == pytest.approx(4 / 9, abs=1e-15)


def test_extreme_expand():
    b = generate_box(GT, JitterSample((1, 1, 1, 1), (-1, -1, 1, 1)))
    assert b == Box(-1.0, -1.0, 7.0, 7.0)
    assert iou(b, GT) == pytest.approx(9 / 16, abs=1e-15)


def test_exhaustive_corners_bound_iou():
    ious = []
    for eta in itertools.product((0.0, 1.0), repeat=4):
        for signs in itertools.product((-1, 1), repeat=4):
            ious.append(iou(generate_box(GT, JitterSample(eta, signs)), GT))
    assert min(ious) == pytest.approx(4 / 9, abs=1e-12)
    assert max(ious) == 1.0


def test_jitter_sample_validation():
    with pytest.raises(ValueError):
        JitterSample((1.5, 0, 0, 0), (1, 1, 1, 1))
    with pytest.raises(ValueError):
        JitterSample((0, 0, 0, 0), (1, 0, 1, 1))
    js = JitterSample.draw(np.random.default_rng(0))
    assert all(0 <= e <= 1 for e in js.eta)


def test_iou_examples():
    a = Box(0, 0, 1, 1)
    assert iou(a, a) == 1.0
    assert iou(a, Box(2, 2, 3, 3)) == 0.0
    # intersection 0.5, union 1.5
    assert iou(a, Box(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_matches_shapely_and_is_symmetric():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 10, (2000, 2, 2))
    wh = rng.uniform(0.1, 6, (2000, 2, 2))
    a = np.concatenate([xy[:, 0], xy[:, 0] + wh[:, 0]], axis=1)
    b = np.concatenate([xy[:, 1], xy[:, 1] + wh[:, 1]], axis=1)
    ours = iou_array(a, b)
    np.testing.assert_allclose(ours, iou_array(b, a), rtol=0, atol=0)
    assert np.all((ours >= 0) & (ours <= 1))
    ref = np.array([shapely_iou(a[i], b[i]) for i in range(200)])
    np.testing.assert_allclose(ours[:200], ref, atol=1e-12)


def test_encode_examples():
    p = Box(0, 0, 2, 2)
    assert encode_target(p, p) == RegressionTarget(0.0, 0.0, 0.0, 0.0)
    t = encode_target(p, Box(1, 0, 3, 2))
    assert (t.dx, t.dy, t.dw, t.dh) == (0.5, 0.0, 0.0, 0.0)
    t = encode_target(p, Box(0, 0, 4, 2))
    assert t.dx == 0.5 and t.dy == 0.0 and t.dh == 0.0
    assert t.dw == pytest.approx(math.log(2), rel=1e-15)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    gt = np.concatenate([rng.uniform(0, 500, (5000, 2)), np.zeros((5000, 2))], axis=1)
    gt[:, 2:] = gt[:, :2] + rng.uniform(5, 300, (5000, 2))
    eta = rng.random((5000, 4))
    signs = np.where(rng.random((5000, 4)) < 0.5, -1.0, 1.0)
    props = jitter_array(gt, eta, signs)
    back = decode_array(props, encode_array(props, gt))
    assert np.max(np.abs(back - gt)) < 1e-9
    b = decode_target(Box.from_array(props[0]), encode_target(Box.from_array(props[0]), Box.from_array(gt[0])))
    np.testing.assert_allclose(b.as_array(), gt[0], atol=1e-9)


def test_proposal_filter_enforces_threshold():
    rng = np.random.default_rng(2)
    gt = np.tile(GT.as_array(), (5000, 1))
    free = generate_proposals(gt, rng)
    assert iou_array(free, gt).min() < 0.5
    filtered = generate_proposals(gt, rng, min_iou=0.5)
    assert iou_array(filtered, gt).min() > 0.5


def test_clip_box():
    assert clip_box(Box(-1, -1, 7, 7), 6, 5) == Box(0, 0, 6, 5)
