"""Detection data model and exact axis-aligned box geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Corner-form box ``(x_min, y_min, x_max, y_max)`` in pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_max >= self.x_min and self.y_max >= self.y_min):
            raise ValueError(f"invalid box corners: {self.as_tuple()}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    category_id: int
    score: float
    image_id: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.category_id < 0:
            raise ValueError(f"negative category_id {self.category_id}")


@dataclass(frozen=True)
class GroundTruthAnnotation:
    box: BoundingBox
    category_id: int
    image_id: int


def mean_score(detections: Iterable[Detection]) -> float:
    scores = [d.score for d in detections]
    if not scores:
        return 0.0
    # fsum keeps the mean independent of detection order
    return min(1.0, math.fsum(scores) / len(scores))


@dataclass(frozen=True)
class ImagePseudoLabels:
    """Accepted pseudo annotations of one image.

    ``uncertainty_score`` is derived from the detections (their mean
    confidence, 0 when empty) and cannot be set independently.
    """

    image_id: int
    detections: tuple[Detection, ...] = ()
    uncertainty_score: float = field(init=False)

    def __post_init__(self) -> None:
        dets = tuple(self.detections)
        for d in dets:
            if d.image_id != self.image_id:
                raise ValueError(
                    f"detection for image {d.image_id} placed in image {self.image_id}"
                )
        object.__setattr__(self, "detections", dets)
        object.__setattr__(self, "uncertainty_score", mean_score(dets))


def _intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return min(1.0, inter / union)


def iof(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over the area of ``a`` (the first argument)."""
    area = a.area
    if area <= 0:
        return 0.0
    return min(1.0, _intersection_area(a, b) / area)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def pairwise_iou(boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> np.ndarray:
    a = boxes_to_array(boxes_a)
    b = boxes_to_array(boxes_b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)

    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    ok = (union > 0) & (inter > 0)
    out[ok] = inter[ok] / union[ok]
    return np.minimum(out, 1.0)
