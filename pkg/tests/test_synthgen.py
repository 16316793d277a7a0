import numpy as np
import pytest

from pseudo_curator.geometry import iou
from pseudo_curator.reweight import abs_cosine
from pseudo_curator.synthgen import SynthConfig, cluster_centres, generate, two_cluster_rois, with_seed


def test_noiseless_detections_equal_ground_truth():
    data = generate(SynthConfig.noiseless(num_images=20, num_models=2))
    assert data.easy_image_ids == data.image_ids
    key = lambda x: (x.image_id, x.category_id, x.box.as_tuple())
    gt = sorted(((g.image_id, g.category_id, g.box.as_tuple()) for g in data.ground_truth))
    for dets in data.model_detections:
        assert sorted(key(d) for d in dets) == gt
        assert all(d.score == 1.0 for d in dets)


def test_same_seed_same_output():
    a, b = generate(SynthConfig(rng_seed=4, num_images=15)), generate(SynthConfig(rng_seed=4, num_images=15))
    assert a.ground_truth == b.ground_truth and a.model_detections == b.model_detections
    assert a.easy_image_ids == b.easy_image_ids
    assert all(x.roi_id == y.roi_id and np.array_equal(x.feature, y.feature) for x, y in zip(a.rois, b.rois))
    c = generate(with_seed(SynthConfig(num_images=15), 5))
    assert c.ground_truth != a.ground_truth


def test_easy_images_score_higher():
    data = generate(SynthConfig(num_images=300, rng_seed=2))
    easy = set(data.easy_image_ids)
    e = [d.score for d in data.model_detections[0] if d.image_id in easy]
    h = [d.score for d in data.model_detections[0] if d.image_id not in easy]
    assert np.mean(e) - np.mean(h) > 0.3
    assert len(easy) == 150


def test_bounds_and_disjoint_objects():
    cfg = SynthConfig(num_images=40, num_models=3, rng_seed=9, image_id_offset=500)
    data = generate(cfg)
    w, h = cfg.image_size
    assert data.image_ids[0] == 500
    boxes = [g.box for g in data.ground_truth] + [d.box for m in data.model_detections for d in m]
    boxes += [r.box for r in data.rois]
    assert all(0 <= b.x_min <= b.x_max <= w and 0 <= b.y_min <= b.y_max <= h for b in boxes)
    assert all(0.0 <= d.score <= 1.0 for m in data.model_detections for d in m)
    for img in data.image_ids[:10]:
        objs = [g.box for g in data.ground_truth if g.image_id == img]
        assert all(iou(a, b) == 0 for k, a in enumerate(objs) for b in objs[k + 1:])


def test_features_cluster_by_category():
    data = generate(SynthConfig(num_images=5, rng_seed=1))
    feats = [r.feature for r in data.rois]
    assert len({f.shape for f in feats}) == 1
    by_image = {}
    for r in data.rois:
        by_image.setdefault(r.image_id, []).append(r)
    cat_of = {}
    for g in data.ground_truth:
        cat_of.setdefault(g.image_id, []).append(g.category_id)
    same, diff = [], []
    for img, rs in by_image.items():
        cats = [c for c in cat_of[img] for _ in range(2)]
        obj = rs[: len(cats)]
        for i in range(len(obj)):
            for j in range(i + 1, len(obj)):
                (same if cats[i] == cats[j] else diff).append(abs_cosine(obj[i].feature, obj[j].feature))
    # centre norm 8/sqrt(2) against noise norm 4 in 16 dims: expected |cos| near 2/3
    assert np.mean(same) > 0.55 and np.mean(diff) < 0.3


def test_cluster_centres_distance():
    c = cluster_centres(np.random.default_rng(0), 8, 3, 5.0)
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(c[i] - c[j]) == pytest.approx(5.0)
            assert abs(c[i] @ c[j]) < 1e-12


def test_two_cluster_rois_labels():
    from pseudo_curator.embedding import pair_labels

    rois = two_cluster_rois(num_images=1, rois_per_cluster=3)
    labels = pair_labels(rois)
    assert sum(p.y for p in labels) == 2 * 3 and len(labels) == 15


@pytest.mark.parametrize("bad", [dict(easy_fraction_true=1.5), dict(easy_score_mean=0.2),
                                 dict(feature_dim=2), dict(boxes_per_image=(3, 1)), dict(num_models=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**bad)
