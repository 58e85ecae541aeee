import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mflow import metrics as MT
from mflow.errors import InvalidParams, ShapeMismatch, ZeroReference

SOFT = MT.MetricsConfig()
LITERAL = MT.MetricsConfig(variant="paper_literal")


def brute(pred, truth, eps=1e-6):
    """Element-by-element loops over the batch, channels and grid."""
    n = truth.shape[0]
    rel = []
    cross = tsq = psq = tabs = pabs = 0.0
    for s in range(n):
        num = den = 0.0
        for idx in np.ndindex(truth.shape[1:]):
            v, vh = truth[(s,) + idx], pred[(s,) + idx]
            num += abs(v - vh)
            den += abs(v)
            cross += abs(v * vh)
            tsq += v * v
            psq += vh * vh
            tabs += abs(v)
            pabs += abs(vh)
        rel.append(num / den)
    return {
        "mre": sum(rel) / n,
        "dice_soft": (2 * cross + eps) / (tsq + psq + eps),
        "iou_soft": (cross + eps) / (tsq + psq - cross + eps),
        "dice_literal": (2 * cross + eps) / (tabs + eps),
        "iou_literal": cross / (tabs + pabs - cross),
    }


def half_overlap():
    truth = np.zeros((1, 1, 8, 8))
    truth[0, 0, 2:6, 2:6] = 1
    pred = np.zeros_like(truth)
    pred[0, 0, 2:6, 2:4] = 1
    return pred, truth


fields = hnp.arrays(np.float64, (2, 1, 4, 5), elements=st.floats(-5, 5, allow_subnormal=False))


def test_config_validation():
    with pytest.raises(InvalidParams):
        MT.dice(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), MT.MetricsConfig(eps=0))
    with pytest.raises(InvalidParams):
        MT.dice(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), MT.MetricsConfig(variant="hard"))


# ---------------------------------------------------------------- MRE

def test_mre_examples(rng):
    t = rng.standard_normal((3, 2, 4, 4))
    assert MT.mre(t, t) == 0.0
    assert MT.mre(np.zeros_like(t), t) == 1.0


def test_mre_zero_reference():
    t = np.ones((2, 1, 3, 3))
    t[1] = 0
    with pytest.raises(ZeroReference):
        MT.mre(t, t)


def test_mre_is_per_sample_average():
    truth = np.stack([np.full((1, 2, 2), 1.0), np.full((1, 2, 2), 10.0)])
    pred = truth + 1.0
    assert MT.mre(pred, truth) == pytest.approx((1.0 + 0.1) / 2)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        MT.mre(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 3)))
    with pytest.raises(ShapeMismatch):
        MT.dice(np.ones((1, 1, 2, 2)), np.ones((1, 2, 2, 2)))


# ---------------------------------------------------------------- Dice / IoU

def test_identity_scores_one(rng):
    t = rng.standard_normal((2, 1, 8, 8))
    total = float((t * t).sum())
    assert abs(MT.dice(t, t) - 1) < SOFT.eps / total
    assert abs(MT.iou(t, t) - 1) < SOFT.eps / total


def test_binary_half_overlap():
    pred, truth = half_overlap()
    d, i = MT.dice(pred, truth), MT.iou(pred, truth)
    assert d == pytest.approx(2 / 3, abs=1e-7)
    assert i == pytest.approx(0.5, abs=1e-7)
    exact = MT.MetricsConfig(eps=1e-300)
    d, i = MT.dice(pred, truth, exact), MT.iou(pred, truth, exact)
    assert abs(d - 2 * i / (1 + i)) < 1e-9


def test_binary_soft_equals_classic_dice(rng):
    a = (rng.random((3, 1, 6, 6)) > 0.4).astype(float)
    b = (rng.random((3, 1, 6, 6)) > 0.6).astype(float)
    inter, sa, sb = (a * b).sum(), a.sum(), b.sum()
    cfg = MT.MetricsConfig(eps=1e-300)
    assert MT.dice(a, b, cfg) == pytest.approx(2 * inter / (sa + sb), abs=1e-12)
    assert MT.iou(a, b, cfg) == pytest.approx(inter / (sa + sb - inter), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_binary_dice_iou_relation(seed):
    r = np.random.default_rng(seed)
    a = (r.random((2, 1, 5, 5)) > 0.5).astype(float)
    b = (r.random((2, 1, 5, 5)) > 0.5).astype(float)
    if (a * b).sum() == 0:
        a[0, 0, 0, 0] = b[0, 0, 0, 0] = 1
    cfg = MT.MetricsConfig(eps=1e-300)
    d, i = MT.dice(a, b, cfg), MT.iou(a, b, cfg)
    assert i <= d
    assert abs(d - 2 * i / (1 + i)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(fields, fields)
def test_soft_symmetric(p, t):
    assert MT.dice(p, t) == pytest.approx(MT.dice(t, p), rel=1e-12)
    assert MT.iou(p, t) == pytest.approx(MT.iou(t, p), rel=1e-12)


def test_random_tensors_match_brute_force(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        truth = r.standard_normal((2, 2, 5, 6))
        pred = truth + 0.3 * r.standard_normal(truth.shape)
        ref = brute(pred, truth)
        assert MT.mre(pred, truth) == pytest.approx(ref["mre"], abs=1e-6)
        assert MT.dice(pred, truth) == pytest.approx(ref["dice_soft"], abs=1e-6)
        assert MT.iou(pred, truth) == pytest.approx(ref["iou_soft"], abs=1e-6)
        assert MT.dice(pred, truth, LITERAL) == pytest.approx(ref["dice_literal"], abs=1e-6)
        assert MT.iou(pred, truth, LITERAL) == pytest.approx(ref["iou_literal"], abs=1e-6)


def test_literal_dice_not_one_on_identity():
    t = np.full((1, 1, 2, 2), 3.0)
    # 2 * 36 / 12: the printed denominator lacks the prediction term
    assert MT.dice(t, t, LITERAL) == pytest.approx(6.0, rel=1e-6)


def test_overlap_sums_pool_across_batches(rng):
    p = rng.standard_normal((6, 1, 4, 4))
    t = rng.standard_normal((6, 1, 4, 4))
    pooled = MT.OverlapSums.of(p[:2], t[:2]) + MT.OverlapSums.of(p[2:], t[2:])
    assert pooled.dice() == pytest.approx(MT.dice(p, t), rel=1e-12)
    assert pooled.iou(LITERAL) == pytest.approx(MT.iou(p, t, LITERAL), rel=1e-12)


def test_accepts_float32():
    t = np.ones((1, 1, 3, 3), dtype=np.float32)
    assert MT.dice(t, t) == pytest.approx(1.0)
