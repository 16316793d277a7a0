"""Per-category thresholding, image confidence scoring and easy-image selection."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Detection, GroundTruthAnnotation, ImagePseudoLabels, mean_score

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class CategoryThresholds:
    per_category: dict[int, float] = field(default_factory=dict)
    default_threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        for cat, thr in [*self.per_category.items(), (None, self.default_threshold)]:
            if not 0.0 <= thr <= 1.0:
                raise ValueError(f"threshold {thr} for category {cat} outside [0, 1]")

    def threshold_for(self, category_id: int) -> float:
        return self.per_category.get(category_id, self.default_threshold)

    def to_dict(self) -> dict:
        return {
            "default_threshold": self.default_threshold,
            "per_category": {str(k): v for k, v in sorted(self.per_category.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CategoryThresholds":
        return cls(
            {int(k): float(v) for k, v in data.get("per_category", {}).items()},
            float(data.get("default_threshold", DEFAULT_THRESHOLD)),
        )


@dataclass(frozen=True)
class SelectionResult:
    easy_image_ids: list[int]
    difficult_image_ids: list[int]
    fraction_k: float


def fit_category_thresholds(
    labeled_gt: Sequence[GroundTruthAnnotation],
    raw_detections: Sequence[Detection],
    num_labeled_images: int,
    num_unlabeled_images: int,
    default_threshold: float = DEFAULT_THRESHOLD,
) -> CategoryThresholds:
    """Expected-count matching of kept detections to labeled-set frequency.

    For category ``c`` the target count on the unlabeled set is
    ``gt_count(c) / num_labeled_images * num_unlabeled_images`` (rounded
    half-up).  The threshold is the score of the detection ranked at that
    count, so ``score >= threshold`` keeps the top ``K`` detections (plus
    exact ties).  When the target is zero the threshold sits just above the
    highest score, capped at 1.
    """
    if num_labeled_images <= 0 or num_unlabeled_images <= 0:
        raise ValueError("image counts must be positive")
    if not labeled_gt:
        return CategoryThresholds({}, default_threshold)

    gt_counts = Counter(a.category_id for a in labeled_gt)
    scores_by_cat: dict[int, list[float]] = defaultdict(list)
    for d in raw_detections:
        scores_by_cat[d.category_id].append(d.score)

    thresholds: dict[int, float] = {}
    for cat, scores in sorted(scores_by_cat.items()):
        ranked = sorted(scores, reverse=True)
        target = gt_counts.get(cat, 0) / num_labeled_images * num_unlabeled_images
        keep = min(len(ranked), int(math.floor(target + 0.5)))
        if keep == 0:
            thresholds[cat] = min(1.0, float(np.nextafter(ranked[0], np.inf)))
        else:
            thresholds[cat] = ranked[keep - 1]
    return CategoryThresholds(thresholds, default_threshold)


def image_uncertainty(labels: ImagePseudoLabels) -> float:
    """Mean detection confidence; higher means more certain (easier)."""
    return mean_score(labels.detections)


def make_pseudo_labels(
    raw_detections: Iterable[Detection],
    thresholds: CategoryThresholds,
    image_ids: Iterable[int] | None = None,
) -> list[ImagePseudoLabels]:
    """Filter detections by category threshold and group them per image.

    ``image_ids`` widens the output universe so that images without any raw
    detection still appear (with an empty list).  Output is sorted by image id.
    """
    kept: dict[int, list[Detection]] = defaultdict(list)
    for d in raw_detections:
        bucket = kept[d.image_id]
        if d.score >= thresholds.threshold_for(d.category_id):
            bucket.append(d)
    if image_ids is not None:
        for img in image_ids:
            kept.setdefault(img, [])
    return [ImagePseudoLabels(img, tuple(kept[img])) for img in sorted(kept)]


def select_easy(all_labels: Sequence[ImagePseudoLabels], fraction_k: float) -> SelectionResult:
    if not 0.0 < fraction_k <= 1.0:
        raise ValueError(f"fraction_k must be in (0, 1], got {fraction_k}")
    ranked = sorted(all_labels, key=lambda l: (-l.uncertainty_score, l.image_id))
    n_easy = easy_count(fraction_k, len(ranked))
    return SelectionResult(
        [l.image_id for l in ranked[:n_easy]],
        [l.image_id for l in ranked[n_easy:]],
        fraction_k,
    )


def easy_count(fraction_k: float, total: int) -> int:
    # rounding guards ceil against k = i/N representation error (0.3 * 10 -> 3.0000000000000004)
    return min(total, math.ceil(round(fraction_k * total, 9)))
