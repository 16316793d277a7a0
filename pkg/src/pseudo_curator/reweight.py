"""Per-RoI training weights from overlap and feature-similarity uncertainty.

Background RoIs that barely overlap any positive RoI, yet look like one of
them, are likely unannotated objects; their weight is pushed towards 0.
Positive RoIs always keep weight 1.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._parallel import parallel_map
from .errors import ValidationError
from .geometry import BoundingBox, iof, pairwise_iou


@dataclass(frozen=True)
class RoiFeatureRecord:
    roi_id: int
    image_id: int
    box: BoundingBox
    is_positive: bool
    feature: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64).ravel())


@dataclass(frozen=True)
class ReweightConfig:
    a: float = 0.25
    b: float = 50.0
    c1: float = 20.0
    c2: float = 20.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.a <= 1.0:
            raise ValueError("a must lie in [0, 1]")
        if self.b <= 0 or self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("b, c1 and c2 must be positive")


@dataclass(frozen=True)
class RoiWeightRow:
    roi_id: int
    image_id: int
    iou_max: float
    D: float
    weight: float


@dataclass(frozen=True)
class RoiWeightTable:
    rows: tuple[RoiWeightRow, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def weights(self) -> dict[tuple[int, int], float]:
        return {(r.image_id, r.roi_id): r.weight for r in self.rows}


def overlap_weight(iou_max: float, cfg: ReweightConfig = ReweightConfig()) -> float:
    return cfg.a + (1.0 - cfg.a) * math.exp(-cfg.b * math.exp(-cfg.c1 * iou_max))


def similarity_factor(D: float, cfg: ReweightConfig = ReweightConfig()) -> float:
    return math.exp(-cfg.b * math.exp(-cfg.c2 * D))


def roi_weight(iou_max: float, D: float, cfg: ReweightConfig = ReweightConfig()) -> float:
    return overlap_weight(iou_max, cfg) * similarity_factor(D, cfg)


def abs_cosine(f_i: np.ndarray, f_j: np.ndarray) -> float:
    """|cos| of the angle between two vectors; 0 if either has zero norm."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ValidationError(f"feature dimension mismatch: {f_i.shape} vs {f_j.shape}")
    ni = float(np.linalg.norm(f_i))
    nj = float(np.linalg.norm(f_j))
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return min(1.0, abs(float(f_i @ f_j)) / (ni * nj))


def similarity_uncertainty(
    roi: RoiFeatureRecord,
    positives: Sequence[RoiFeatureRecord],
    embedding: np.ndarray | None = None,
) -> float:
    """``1 - max_j |cos(f_roi, f_j)| * (1 - IoF(roi, j))``; 1 with no positives.

    ``embedding`` (shape ``out x d``) maps features before comparison.
    """
    if not positives:
        return 1.0
    f_i = roi.feature if embedding is None else embedding @ roi.feature
    best = 0.0
    for p in positives:
        if p.feature.shape != roi.feature.shape:
            raise ValidationError(
                f"roi {roi.roi_id} has feature dim {roi.feature.shape[0]}, "
                f"roi {p.roi_id} has {p.feature.shape[0]}"
            )
        f_j = p.feature if embedding is None else embedding @ p.feature
        best = max(best, abs_cosine(f_i, f_j) * (1.0 - iof(roi.box, p.box)))
    return 1.0 - best


def _image_rows(
    rois: Sequence[RoiFeatureRecord], cfg: ReweightConfig, embedding: np.ndarray | None
) -> list[RoiWeightRow]:
    positives = [r for r in rois if r.is_positive]
    negatives = [r for r in rois if not r.is_positive]
    rows = [RoiWeightRow(p.roi_id, p.image_id, 1.0, 1.0, 1.0) for p in positives]
    if negatives:
        overlaps = pairwise_iou([r.box for r in negatives], [p.box for p in positives])
        for n, roi in enumerate(negatives):
            iou_max = float(overlaps[n].max()) if positives else 0.0
            D = similarity_uncertainty(roi, positives, embedding)
            rows.append(RoiWeightRow(roi.roi_id, roi.image_id, iou_max, D, roi_weight(iou_max, D, cfg)))
    return rows


def build_weight_table(
    rois: Sequence[RoiFeatureRecord],
    cfg: ReweightConfig = ReweightConfig(),
    embedding: np.ndarray | None = None,
) -> RoiWeightTable:
    """Weight every RoI; rows come back sorted by ``(image_id, roi_id)``.

    Positive rows report ``iou_max = D = weight = 1``.
    """
    by_image: dict[int, list[RoiFeatureRecord]] = defaultdict(list)
    dims = {r.feature.shape[0] for r in rois}
    if len(dims) > 1:
        raise ValidationError(f"mixed feature dimensions {sorted(dims)}")
    for r in rois:
        by_image[r.image_id].append(r)
    for image_id, group in by_image.items():
        dupes = sorted(i for i, n in Counter(r.roi_id for r in group).items() if n > 1)
        if dupes:
            raise ValidationError(f"duplicate roi_id {dupes} in image {image_id}")
        group.sort(key=lambda r: r.roi_id)

    per_image = parallel_map(
        lambda img: _image_rows(by_image[img], cfg, embedding), sorted(by_image)
    )
    rows = sorted((row for rs in per_image for row in rs), key=lambda r: (r.image_id, r.roi_id))
    return RoiWeightTable(tuple(rows))
