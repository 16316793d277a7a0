"""Synthetic ground truth, noisy multi-model detections and RoI features.

Easy images get confident, tight, mostly-correct detections; difficult images
get low scores, loose boxes, many misses and false positives.  RoI features
are drawn around per-category cluster centres so that same-category RoIs are
near-parallel while different categories are near-orthogonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BoundingBox, Detection, GroundTruthAnnotation
from .reweight import RoiFeatureRecord


@dataclass(frozen=True)
class SynthConfig:
    rng_seed: int = 0
    num_images: int = 100
    image_id_offset: int = 0
    image_size: tuple[float, float] = (640.0, 480.0)
    categories: tuple[int, ...] = (0, 1, 2)
    boxes_per_image: tuple[int, int] = (4, 8)
    box_size: tuple[float, float] = (24.0, 120.0)
    easy_fraction_true: float = 0.5
    num_models: int = 1
    easy_score_mean: float = 0.85
    difficult_score_mean: float = 0.45
    score_sigma: float = 0.1
    fp_score_drop: float = 0.1
    easy_jitter: float = 2.0
    difficult_jitter: float = 6.0
    easy_fp_rate: float = 0.1
    difficult_fp_rate: float = 1.0
    easy_fn_rate: float = 0.05
    difficult_fn_rate: float = 0.7
    feature_dim: int = 16
    feature_separation: float = 8.0
    feature_sigma: float = 1.0
    rois_per_object: int = 2
    background_rois: int = 3

    def __post_init__(self) -> None:
        probs = (
            self.easy_fraction_true,
            self.easy_fp_rate,
            self.difficult_fp_rate,
            self.easy_fn_rate,
            self.difficult_fn_rate,
        )
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.easy_score_mean < self.difficult_score_mean:
            raise ValueError("easy images must have the higher score mean")
        if self.feature_dim < len(self.categories) + 1:
            raise ValueError(
                f"feature_dim {self.feature_dim} cannot hold {len(self.categories)} "
                "category clusters plus background"
            )
        lo, hi = self.boxes_per_image
        if lo < 0 or hi < lo:
            raise ValueError("boxes_per_image must be a non-decreasing non-negative range")
        if self.num_images < 0 or self.num_models < 1:
            raise ValueError("need num_images >= 0 and num_models >= 1")

    @classmethod
    def noiseless(cls, **overrides) -> "SynthConfig":
        base = dict(
            easy_fraction_true=1.0,
            easy_score_mean=1.0,
            difficult_score_mean=1.0,
            score_sigma=0.0,
            easy_jitter=0.0,
            difficult_jitter=0.0,
            easy_fp_rate=0.0,
            difficult_fp_rate=0.0,
            easy_fn_rate=0.0,
            difficult_fn_rate=0.0,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class SynthData:
    config: SynthConfig
    image_ids: list[int]
    ground_truth: list[GroundTruthAnnotation]
    model_detections: list[list[Detection]]
    rois: list[RoiFeatureRecord]
    easy_image_ids: list[int]
    category_names: dict[int, str] = field(default_factory=dict)


def _place_boxes(rng: np.random.Generator, cfg: SynthConfig, count: int) -> list[BoundingBox]:
    width, height = cfg.image_size
    lo, hi = cfg.box_size
    boxes: list[BoundingBox] = []
    for _ in range(count * 50):
        if len(boxes) == count:
            break
        w, h = rng.uniform(lo, hi, size=2)
        x = rng.uniform(0, width - w)
        y = rng.uniform(0, height - h)
        cand = BoundingBox(x, y, x + w, y + h)
        # objects are kept disjoint, with a small gap
        if all(
            cand.x_min > b.x_max + 2 or b.x_min > cand.x_max + 2 or cand.y_min > b.y_max + 2 or b.y_min > cand.y_max + 2
            for b in boxes
        ):
            boxes.append(cand)
    return boxes


def _jitter(rng: np.random.Generator, box: BoundingBox, sigma: float, size) -> BoundingBox:
    width, height = size
    if sigma == 0:
        return box
    x0, y0, x1, y1 = np.array(box.as_tuple()) + rng.normal(0.0, sigma, size=4)
    x0, x1 = np.clip([x0, x1], 0.0, width)
    y0, y1 = np.clip([y0, y1], 0.0, height)
    if x1 - x0 < 1.0:
        x0, x1 = box.x_min, box.x_max
    if y1 - y0 < 1.0:
        y0, y1 = box.y_min, box.y_max
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def _score(rng: np.random.Generator, mean: float, sigma: float) -> float:
    if sigma == 0:
        return float(np.clip(mean, 0.0, 1.0))
    return float(np.clip(rng.normal(mean, sigma), 0.0, 1.0))


def _random_box(rng: np.random.Generator, cfg: SynthConfig) -> BoundingBox:
    width, height = cfg.image_size
    lo, hi = cfg.box_size
    w, h = rng.uniform(lo, hi, size=2)
    x = rng.uniform(0, width - w)
    y = rng.uniform(0, height - h)
    return BoundingBox(x, y, x + w, y + h)


def cluster_centres(rng: np.random.Generator, dim: int, count: int, distance: float) -> np.ndarray:
    """``count`` mutually orthogonal centres, pairwise ``distance`` apart."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, count)))
    return q.T[:count] * (distance / np.sqrt(2.0))


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng(cfg.rng_seed)
    image_ids = [cfg.image_id_offset + i for i in range(cfg.num_images)]
    n_easy = int(round(cfg.easy_fraction_true * cfg.num_images))
    easy = set(rng.permutation(image_ids)[:n_easy].tolist()) if image_ids else set()

    cats = list(cfg.categories)
    centres = cluster_centres(rng, cfg.feature_dim, len(cats) + 1, cfg.feature_separation * cfg.feature_sigma)
    centre_of = {c: centres[k] for k, c in enumerate(cats)}
    background_centre = centres[-1]

    gt: list[GroundTruthAnnotation] = []
    per_model: list[list[Detection]] = [[] for _ in range(cfg.num_models)]
    rois: list[RoiFeatureRecord] = []

    for image_id in image_ids:
        is_easy = image_id in easy
        score_mean = cfg.easy_score_mean if is_easy else cfg.difficult_score_mean
        jitter = cfg.easy_jitter if is_easy else cfg.difficult_jitter
        fp_rate = cfg.easy_fp_rate if is_easy else cfg.difficult_fp_rate
        fn_rate = cfg.easy_fn_rate if is_easy else cfg.difficult_fn_rate

        count = int(rng.integers(cfg.boxes_per_image[0], cfg.boxes_per_image[1] + 1))
        objects = [
            GroundTruthAnnotation(box, int(rng.choice(cats)), image_id)
            for box in _place_boxes(rng, cfg, count)
        ]
        gt.extend(objects)

        detected_by_first = []
        for m in range(cfg.num_models):
            for obj in objects:
                hit = rng.random() >= fn_rate
                if m == 0:
                    detected_by_first.append(hit)
                if hit:
                    per_model[m].append(
                        Detection(_jitter(rng, obj.box, jitter, cfg.image_size), obj.category_id,
                                  _score(rng, score_mean, cfg.score_sigma), image_id)
                    )
                if rng.random() < fp_rate:
                    per_model[m].append(
                        Detection(_random_box(rng, cfg), int(rng.choice(cats)),
                                  _score(rng, score_mean - cfg.fp_score_drop, cfg.score_sigma), image_id)
                    )

        roi_id = 0
        for obj, hit in zip(objects, detected_by_first):
            for _ in range(cfg.rois_per_object):
                feature = centre_of[obj.category_id] + rng.normal(0.0, cfg.feature_sigma, cfg.feature_dim)
                rois.append(RoiFeatureRecord(roi_id, image_id, _jitter(rng, obj.box, 2.0, cfg.image_size), hit, feature))
                roi_id += 1
        for _ in range(cfg.background_rois):
            feature = background_centre + rng.normal(0.0, cfg.feature_sigma, cfg.feature_dim)
            rois.append(RoiFeatureRecord(roi_id, image_id, _random_box(rng, cfg), False, feature))
            roi_id += 1

    return SynthData(
        config=cfg,
        image_ids=image_ids,
        ground_truth=gt,
        model_detections=per_model,
        rois=rois,
        easy_image_ids=sorted(easy),
        category_names={c: f"class_{c}" for c in cats},
    )


def two_cluster_rois(
    rng_seed: int = 0,
    num_images: int = 8,
    rois_per_cluster: int = 6,
    feature_dim: int = 8,
    separation: float = 7.0,
    sigma: float = 1.0,
) -> list[RoiFeatureRecord]:
    """Toy set: per image, two groups of nested boxes with features from two
    orthogonal centres ``separation * sigma`` apart.

    Nested boxes cover each other fully (IoF 1), the groups never touch, so
    every within-group pair is labeled similar and every cross pair not.
    """
    rng = np.random.default_rng(rng_seed)
    centres = cluster_centres(rng, feature_dim, 2, separation * sigma)
    rois = []
    for image_id in range(num_images):
        roi_id = 0
        for group, (x0, y0) in enumerate([(10.0, 10.0), (300.0, 200.0)]):
            for k in range(rois_per_cluster):
                shrink = 6.0 * k
                box = BoundingBox(x0 + shrink, y0 + shrink, x0 + 120.0 - shrink, y0 + 100.0 - shrink)
                feature = centres[group] + rng.normal(0.0, sigma, feature_dim)
                rois.append(RoiFeatureRecord(roi_id, image_id, box, group == 0 and k == 0, feature))
                roi_id += 1
    return rois


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, rng_seed=seed)
