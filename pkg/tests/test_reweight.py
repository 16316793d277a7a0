import math
import random
from decimal import Decimal, getcontext

import numpy as np
import pytest

from oracles import naive_weight_rows
from pseudo_curator.errors import ValidationError
from pseudo_curator.geometry import BoundingBox
from pseudo_curator.reweight import (
    ReweightConfig,
    RoiFeatureRecord,
    abs_cosine,
    build_weight_table,
    overlap_weight,
    roi_weight,
    similarity_factor,
    similarity_uncertainty,
)

getcontext().prec = 50


def dexp(x):
    return Decimal(x).exp()


def overlap_closed_form(iou, a=0.25, b=50, c=20):
    a, b, c, iou = Decimal(a), Decimal(b), Decimal(c), Decimal(iou)
    return float(a + (1 - a) * dexp(-b * dexp(-c * iou)))


def roi(roi_id, box, feature, positive=False, image=0):
    return RoiFeatureRecord(roi_id, image, BoundingBox(*box), positive, np.asarray(feature, dtype=float))


# scalar weights -------------------------------------------------------------

def test_overlap_weight_endpoints():
    assert overlap_weight(0.0) == pytest.approx(overlap_closed_form(0.0), abs=1e-12)
    assert overlap_weight(0.0) == pytest.approx(0.25, abs=1e-12)
    assert overlap_weight(1.0) == pytest.approx(overlap_closed_form(1.0), abs=1e-15)
    assert overlap_weight(1.0) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("iou", [0.0, 0.1, 0.2, 0.35, 0.5, 0.9])
def test_overlap_weight_against_decimal(iou):
    assert overlap_weight(iou) == pytest.approx(overlap_closed_form(iou), rel=1e-12, abs=1e-15)


def test_a_one_is_constant():
    cfg = ReweightConfig(a=1.0)
    assert all(overlap_weight(x, cfg) == 1.0 for x in np.linspace(0, 1, 11))


def test_config_validation():
    for bad in (dict(a=-0.1), dict(a=1.5), dict(b=0), dict(c1=-1), dict(c2=0)):
        with pytest.raises(ValueError):
            ReweightConfig(**bad)


def test_roi_weight_examples():
    assert roi_weight(1.0, 1.0) == pytest.approx(1.0, abs=1e-6)
    for iou in (0.0, 0.5, 1.0):
        assert roi_weight(iou, 0.0) <= math.exp(-50)


def test_roi_weight_factorises():
    rng = random.Random(5)
    for _ in range(200):
        iou, D = rng.random(), rng.random()
        expected = overlap_weight(iou) * math.exp(-50 * math.exp(-20 * D))
        assert roi_weight(iou, D) == pytest.approx(expected, rel=1e-12, abs=1e-300)
        assert roi_weight(iou, D) == overlap_weight(iou) * similarity_factor(D)


def test_monotone_on_grid():
    grid = np.linspace(0, 1, 201)
    ow = [overlap_weight(x) for x in grid]
    assert all(b >= a for a, b in zip(ow, ow[1:]))
    for fixed in (0.0, 0.3, 0.7, 1.0):
        by_iou = [roi_weight(x, fixed) for x in grid]
        by_d = [roi_weight(fixed, x) for x in grid]
        assert all(b >= a for a, b in zip(by_iou, by_iou[1:]))
        assert all(b >= a for a, b in zip(by_d, by_d[1:]))
        assert all(0.0 <= w <= 1.0 for w in by_iou + by_d)


# similarity ------------------------------------------------------------------

def test_abs_cosine_cases():
    f = np.array([1.0, 2.0, -3.0])
    assert abs_cosine(f, f) == pytest.approx(1.0)
    assert abs_cosine(f, -f) == pytest.approx(1.0)
    assert abs_cosine(np.array([1.0, 0.0]), np.array([0.0, 4.0])) == 0.0
    assert abs_cosine(np.zeros(3), f) == 0.0
    with pytest.raises(ValidationError):
        abs_cosine(f, np.ones(2))


def test_similarity_uncertainty_cases():
    r = roi(0, (10, 10, 20, 20), [1.0, 0.0])
    assert similarity_uncertainty(r, []) == 1.0
    # identical feature but fully covered by the positive
    covering = roi(1, (0, 0, 50, 50), [1.0, 0.0], positive=True)
    assert similarity_uncertainty(r, [covering]) == 1.0


def test_similarity_uncertainty_two_positive_example():
    # d=0.8 with a disjoint positive, d=0.9 with a positive covering half the roi
    r = roi(0, (0, 0, 10, 10), [1.0, 0.0])
    p1 = roi(1, (100, 100, 110, 110), [0.8, 0.6], positive=True)
    p2 = roi(2, (5, 0, 15, 10), [0.9, math.sqrt(1 - 0.81)], positive=True)
    expected = 1 - max(0.8 * (1 - 0.0), 0.9 * (1 - 0.5))
    assert expected == pytest.approx(0.2)
    assert similarity_uncertainty(r, [p1, p2]) == pytest.approx(0.2, abs=1e-12)


def test_similarity_uncertainty_dimension_mismatch():
    with pytest.raises(ValidationError):
        similarity_uncertainty(roi(0, (0, 0, 1, 1), [1.0]), [roi(1, (0, 0, 1, 1), [1.0, 1.0], True)])


def test_similarity_uncertainty_uses_embedding():
    r = roi(0, (0, 0, 10, 10), [1.0, 0.0])
    p = roi(1, (50, 50, 60, 60), [0.0, 1.0], positive=True)
    assert similarity_uncertainty(r, [p]) == pytest.approx(1.0)
    collapse = np.array([[1.0, 1.0]])
    assert similarity_uncertainty(r, [p], collapse) == pytest.approx(0.0)


def test_similarity_uncertainty_range():
    rng = np.random.default_rng(2)
    for _ in range(100):
        lo, hi = np.sort(rng.uniform(0, 50, 2))
        r = roi(0, (lo, lo, hi, hi), rng.normal(size=4))
        ps = [roi(k, (*rng.uniform(0, 30, 2), *rng.uniform(30, 60, 2)), rng.normal(size=4), True)
              for k in range(1, 4)]
        assert 0.0 <= similarity_uncertainty(r, ps) <= 1.0


# weight table -------------------------------------------------------------------

def test_only_positives():
    table = build_weight_table([roi(i, (0, 0, 5, 5), [1, 0], True) for i in range(3)])
    assert [r.weight for r in table.rows] == [1.0, 1.0, 1.0]


def test_lone_negative_closed_form():
    table = build_weight_table([roi(0, (0, 0, 5, 5), [1, 2])])
    row = table.rows[0]
    assert (row.iou_max, row.D) == (0.0, 1.0)
    assert row.weight == pytest.approx(overlap_weight(0.0) * math.exp(-50 * math.exp(-20)), rel=1e-14)


def five_roi_instance(seed):
    rng = np.random.default_rng(seed)
    rois = []
    for k in range(5):
        x, y = rng.uniform(0, 60, 2)
        w, h = rng.uniform(5, 40, 2)
        rois.append(roi(k, (x, y, x + w, y + h), rng.normal(size=6), positive=bool(k < 2)))
    return rois


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("cfg", [ReweightConfig(), ReweightConfig(a=0.1, b=5, c1=4, c2=3)])
def test_table_against_naive_recomputation(seed, cfg):
    rois = five_roi_instance(seed)
    rows = build_weight_table(rois, cfg).rows
    got = sorted((r.image_id, r.roi_id, r.iou_max, r.D, r.weight) for r in rows)
    ref = naive_weight_rows(rois, cfg.a, cfg.b, cfg.c1, cfg.c2)
    assert len(got) == len(ref)
    for g, e in zip(got, ref):
        assert g[:2] == e[:2]
        assert g[2:] == pytest.approx(e[2:], rel=1e-9, abs=1e-12)


def test_order_invariance_and_sorting():
    rois = [r for s in range(4) for r in
            [RoiFeatureRecord(x.roi_id, s, x.box, x.is_positive, x.feature) for x in five_roi_instance(s)]]
    table = build_weight_table(rois)
    shuffled = [rois[i] for i in np.random.default_rng(0).permutation(len(rois))]
    assert build_weight_table(shuffled) == table
    keys = [(r.image_id, r.roi_id) for r in table.rows]
    assert keys == sorted(keys)
    assert all(0.0 <= r.weight <= 1.0 for r in table.rows)


def test_duplicate_roi_id_rejected():
    with pytest.raises(ValidationError, match="duplicate roi_id"):
        build_weight_table([roi(1, (0, 0, 1, 1), [1]), roi(1, (0, 0, 2, 2), [1])])
    # same id in different images is fine
    build_weight_table([roi(1, (0, 0, 1, 1), [1], image=0), roi(1, (0, 0, 2, 2), [1], image=1)])


def test_mixed_dimensions_rejected():
    with pytest.raises(ValidationError):
        build_weight_table([roi(0, (0, 0, 1, 1), [1]), roi(1, (0, 0, 1, 1), [1, 2], image=1)])


def test_unannotated_duplicate_is_suppressed():
    feat = np.array([1.0, 2.0, 0.5])
    other = np.array([-2.0, 1.0, 0.0])
    rois = [
        roi(0, (0, 0, 40, 40), feat, positive=True),
        roi(1, (200, 200, 240, 240), feat),
        roi(2, (100, 0, 140, 40), other),
    ]
    w = build_weight_table(rois).weights()
    assert w[(0, 0)] == 1.0
    assert w[(0, 1)] < 0.1 * w[(0, 2)]
    assert w[(0, 2)] == pytest.approx(overlap_weight(0.0) * similarity_factor(1.0))
