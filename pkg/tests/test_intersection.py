from collections import Counter

import numpy as np
import pytest

from oracles import all_model_consensus_count, max_matching_count, object_instance, random_boxes
from pseudo_curator.errors import ValidationError
from pseudo_curator.geometry import BoundingBox, Detection, ImagePseudoLabels
from pseudo_curator.intersection import IntersectionConfig, greedy_match, intersect_all, intersect_two


def D(x0, y0, x1, y1, cat=0, score=0.9, image=0):
    return Detection(BoundingBox(x0, y0, x1, y1), cat, score, image)


def L(*dets, image=0):
    return ImagePseudoLabels(image, tuple(dets))


def test_identical_sets():
    x = L(D(0, 0, 10, 10, score=0.8), D(20, 20, 30, 35, cat=1, score=0.6))
    out = intersect_two(x, x)
    assert sorted(d.box.as_tuple() for d in out.detections) == sorted(d.box.as_tuple() for d in x.detections)
    assert sorted(d.score for d in out.detections) == [0.6, 0.8]


def test_disjoint_sets():
    out = intersect_two(L(D(0, 0, 10, 10)), L(D(50, 50, 60, 60)))
    assert out.detections == () and out.uncertainty_score == 0.0


def test_mismatched_images_rejected():
    with pytest.raises(ValidationError):
        intersect_two(L(image=1), L(image=2))


def test_three_vs_two_with_cross_category_overlap():
    a = L(D(0, 0, 10, 10, cat=0, score=0.9), D(20, 0, 30, 10, cat=1, score=0.5), D(50, 50, 60, 60, cat=0, score=0.7))
    b = L(D(1, 0, 11, 10, cat=0, score=0.6), D(20, 0, 30, 10, cat=2, score=0.95))
    out = intersect_two(a, b)
    assert len(out.detections) == 1
    kept = out.detections[0]
    assert kept.box == a.detections[0].box and kept.score == 0.6 and kept.category_id == 0
    assert len(greedy_match(a.detections, b.detections, 0.5)) == max_matching_count(a.detections, b.detections, 0.5)
    assert out.uncertainty_score == pytest.approx(0.6)


def test_kept_box_is_higher_scoring_member():
    out = intersect_two(L(D(0, 0, 10, 10, score=0.4)), L(D(1, 1, 10, 10, score=0.7)))
    assert out.detections[0].box == BoundingBox(1, 1, 10, 10)
    assert out.detections[0].score == 0.4


def test_geometric_mean_combine():
    cfg = IntersectionConfig(score_combine="geometric_mean")
    out = intersect_two(L(D(0, 0, 10, 10, score=0.25)), L(D(0, 0, 10, 10, score=1.0)), cfg)
    assert out.detections[0].score == pytest.approx(0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        IntersectionConfig(match_iou_threshold=0.0)
    with pytest.raises(ValueError):
        IntersectionConfig(score_combine="max")


def test_intersect_all_single_and_copies():
    rng = np.random.default_rng(0)
    out = [L(*random_boxes(rng, 5, image_id=i), image=i) for i in range(4)]
    assert intersect_all([out]) == out
    for copies in (2, 3):
        folded = intersect_all([out] * copies)
        for got, ref in zip(folded, out):
            assert Counter(d.box for d in got.detections) == Counter(d.box for d in ref.detections if d.box.area > 0)


def test_intersect_all_reports_missing_ids():
    a = [L(image=1), L(image=2)]
    b = [L(image=1), L(image=3)]
    with pytest.raises(ValidationError, match=r"missing \[2\], extra \[3\]"):
        intersect_all([a, b])


def test_pathological_overlap_greedy_is_not_optimal():
    """Outside the non-overlapping regime greedy can lose a pair; documented
    here so nobody mistakes the NMS-regime equality for a general theorem."""
    b1 = D(0, 0, 10, 10)
    a = [D(0, 0, 10, 7), D(0, 3, 10, 10)]
    b = [b1, D(0, -3, 10, 7)]
    assert len(greedy_match(a, b, 0.5)) == 1
    assert max_matching_count(a, b, 0.5) == 2


@pytest.mark.parametrize("seed", range(60))
def test_three_models_against_all_model_brute_force(seed):
    rng = np.random.default_rng(seed)
    _, models = object_instance(rng, 3, 5)
    labels = [[L(*m)] for m in models]
    out = intersect_all(labels)[0]
    assert len(out.detections) == all_model_consensus_count(models, 0.5)
    inputs = {d.box for m in models for d in m}
    assert all(d.box in inputs for d in out.detections)


@pytest.mark.parametrize("seed", range(40))
def test_invariants_on_random_overlapping_boxes(seed):
    rng = np.random.default_rng(1000 + seed)
    models = [L(*random_boxes(rng, int(rng.integers(0, 9)))) for _ in range(int(rng.integers(1, 4)))]
    out = intersect_all([[m] for m in models])[0]
    inputs = [Counter(d.category_id for d in m.detections) for m in models]
    for cat, n in Counter(d.category_id for d in out.detections).items():
        assert n <= min(c[cat] for c in inputs)
    all_boxes = {d.box for m in models for d in m.detections}
    assert all(d.box in all_boxes for d in out.detections)
    if len(models) >= 2:
        a, b = models[0], models[1]
        pair = intersect_two(a, b)
        for d in pair.detections:
            contributors = [x.score for x in a.detections + b.detections if x.box == d.box]
            assert d.score <= max(contributors)
        # permuting detections within one model keeps the result set
        perm = L(*[a.detections[i] for i in rng.permutation(len(a.detections))])
        assert set(intersect_two(perm, b).detections) == set(pair.detections)
    idem = intersect_two(models[0], models[0])
    assert Counter(d.box for d in idem.detections) == Counter(d.box for d in models[0].detections)


def test_min_score_bound_on_matched_pairs():
    a = L(D(0, 0, 10, 10, score=0.3), D(20, 20, 30, 30, score=0.9))
    b = L(D(0, 0, 10, 11, score=0.8), D(20, 20, 30, 31, score=0.4))
    pairs = greedy_match(a.detections, b.detections, 0.5)
    out = intersect_two(a, b)
    for d, (i, j) in zip(sorted(out.detections, key=lambda d: d.box.x_min), sorted(pairs)):
        assert d.score <= a.detections[i].score and d.score <= b.detections[j].score
