"""Consensus of pseudo labels across models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

from ._parallel import parallel_map
from .errors import ValidationError
from .geometry import Detection, ImagePseudoLabels, pairwise_iou

ScoreCombine = Literal["min", "geometric_mean"]


@dataclass(frozen=True)
class IntersectionConfig:
    match_iou_threshold: float = 0.5
    score_combine: ScoreCombine = "min"

    def __post_init__(self) -> None:
        if not 0.0 < self.match_iou_threshold <= 1.0:
            raise ValueError("match_iou_threshold must be in (0, 1]")
        if self.score_combine not in ("min", "geometric_mean"):
            raise ValueError(f"unknown score_combine {self.score_combine!r}")


def greedy_match(
    dets_a: Sequence[Detection], dets_b: Sequence[Detection], threshold: float
) -> list[tuple[int, int]]:
    """One-to-one same-category matching, highest IoU first.

    Ties are broken by (a-index, b-index).  Returns index pairs into the
    given sequences, in the order they were accepted.
    """
    if not dets_a or not dets_b:
        return []
    overlaps = pairwise_iou([d.box for d in dets_a], [d.box for d in dets_b])
    candidates = [
        (-overlaps[i, j], i, j)
        for i, da in enumerate(dets_a)
        for j, db in enumerate(dets_b)
        if da.category_id == db.category_id and overlaps[i, j] >= threshold
    ]
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def _combine(sa: float, sb: float, mode: ScoreCombine) -> float:
    if mode == "min":
        return min(sa, sb)
    return min(1.0, math.sqrt(sa * sb))


def _order_key(d: Detection) -> tuple:
    return (d.category_id, -d.score, d.box.as_tuple())


def intersect_two(
    a: ImagePseudoLabels, b: ImagePseudoLabels, cfg: IntersectionConfig = IntersectionConfig()
) -> ImagePseudoLabels:
    if a.image_id != b.image_id:
        raise ValidationError(f"cannot intersect image {a.image_id} with image {b.image_id}")
    out = []
    for i, j in greedy_match(a.detections, b.detections, cfg.match_iou_threshold):
        da, db = a.detections[i], b.detections[j]
        keeper = da if da.score >= db.score else db
        out.append(
            Detection(keeper.box, keeper.category_id, _combine(da.score, db.score, cfg.score_combine), a.image_id)
        )
    out.sort(key=_order_key)
    return ImagePseudoLabels(a.image_id, tuple(out))


def intersect_all(
    model_outputs: Sequence[Sequence[ImagePseudoLabels]],
    cfg: IntersectionConfig = IntersectionConfig(),
) -> list[ImagePseudoLabels]:
    """Left fold of :func:`intersect_two` over models, in the given order."""
    if not model_outputs:
        raise ValidationError("intersect_all needs at least one model output")
    indexed = [{l.image_id: l for l in out} for out in model_outputs]
    reference = set(indexed[0])
    problems = []
    for m, idx in enumerate(indexed[1:], start=1):
        missing = sorted(reference - set(idx))
        extra = sorted(set(idx) - reference)
        if missing or extra:
            problems.append(f"model {m}: missing {missing}, extra {extra}")
    if problems:
        raise ValidationError("inconsistent image ids across models; " + "; ".join(problems))
    if len(indexed) == 1:
        return list(model_outputs[0])

    def fold(image_id: int) -> ImagePseudoLabels:
        acc = indexed[0][image_id]
        for idx in indexed[1:]:
            acc = intersect_two(acc, idx[image_id], cfg)
        return acc

    return parallel_map(fold, sorted(reference))
