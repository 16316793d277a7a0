"""Recall/precision image diagnostic and matching-based AP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ._parallel import parallel_map
from .geometry import Detection, GroundTruthAnnotation, ImagePseudoLabels, pairwise_iou


@dataclass(frozen=True)
class ImageDifficultyReport:
    image_id: int
    recall: float
    precision: float
    is_easy: bool


@dataclass(frozen=True)
class DatasetDifficultySummary:
    easy_fraction: float
    reports: tuple[ImageDifficultyReport, ...]

    @property
    def easy_image_ids(self) -> list[int]:
        return [r.image_id for r in self.reports if r.is_easy]


def match_count(
    preds: Sequence[Detection], gt: Sequence[GroundTruthAnnotation], iou_threshold: float = 0.5
) -> int:
    """Number of greedy matches; predictions are visited by descending score
    (index order on ties) and take the free same-category GT of highest IoU."""
    return len(_greedy_pairs(preds, gt, iou_threshold))


def _greedy_pairs(preds, gt, iou_threshold):
    pairs = []
    cats = {p.category_id for p in preds} & {g.category_id for g in gt}
    for cat in sorted(cats):
        p_idx = [i for i, p in enumerate(preds) if p.category_id == cat]
        g_idx = [j for j, g in enumerate(gt) if g.category_id == cat]
        overlaps = pairwise_iou([preds[i].box for i in p_idx], [gt[j].box for j in g_idx])
        taken = np.zeros(len(g_idx), dtype=bool)
        for row in sorted(range(len(p_idx)), key=lambda r: (-preds[p_idx[r]].score, p_idx[r])):
            cand = np.where(taken, -1.0, overlaps[row])
            col = int(np.argmax(cand))
            if cand[col] >= iou_threshold:
                taken[col] = True
                pairs.append((p_idx[row], g_idx[col]))
    return pairs


def image_pr(
    pseudo: ImagePseudoLabels | Sequence[Detection],
    gt: Sequence[GroundTruthAnnotation],
    iou_threshold: float = 0.5,
) -> tuple[float, float]:
    preds = list(pseudo.detections if isinstance(pseudo, ImagePseudoLabels) else pseudo)
    matched = match_count(preds, gt, iou_threshold)
    recall = matched / len(gt) if gt else 1.0
    precision = matched / len(preds) if preds else 1.0
    return recall, precision


def is_easy(recall: float, precision: float, margin: float = 0.0) -> bool:
    """Correct knowledge (recall) at least matches noise (1 - precision)."""
    return recall - (1.0 - precision) >= margin


def classify_difficulty(reports: Iterable, margin: float = 0.0) -> DatasetDifficultySummary:
    """Accepts ``ImageDifficultyReport`` or ``(image_id, recall, precision)`` items."""
    out = []
    for r in reports:
        image_id, recall, precision = (
            (r.image_id, r.recall, r.precision) if isinstance(r, ImageDifficultyReport) else r
        )
        out.append(ImageDifficultyReport(image_id, recall, precision, is_easy(recall, precision, margin)))
    out.sort(key=lambda r: r.image_id)
    fraction = sum(r.is_easy for r in out) / len(out) if out else 0.0
    return DatasetDifficultySummary(fraction, tuple(out))


def difficulty_summary(
    pseudo_labels: Sequence[ImagePseudoLabels],
    gt: Sequence[GroundTruthAnnotation],
    iou_threshold: float = 0.5,
    margin: float = 0.0,
) -> DatasetDifficultySummary:
    """Per-image diagnostic over the images carrying pseudo labels."""
    gt_by_image: dict[int, list[GroundTruthAnnotation]] = defaultdict(list)
    for g in gt:
        gt_by_image[g.image_id].append(g)
    rows = parallel_map(
        lambda l: (l.image_id, *image_pr(l, gt_by_image.get(l.image_id, []), iou_threshold)),
        pseudo_labels,
    )
    return classify_difficulty(rows, margin)


def average_precision(
    predictions: Sequence[Detection],
    gt: Sequence[GroundTruthAnnotation],
    category: int,
    iou_threshold: float = 0.5,
) -> float | None:
    """All-points interpolated AP for one category; ``None`` when it has no GT."""
    gts = [g for g in gt if g.category_id == category]
    if not gts:
        return None
    preds = [p for p in predictions if p.category_id == category]
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))

    gt_by_image: dict[int, list[GroundTruthAnnotation]] = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g)
    taken = {img: np.zeros(len(v), dtype=bool) for img, v in gt_by_image.items()}

    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        p = preds[i]
        image_gt = gt_by_image.get(p.image_id)
        if not image_gt:
            continue
        overlaps = pairwise_iou([p.box], [g.box for g in image_gt])[0]
        cand = np.where(taken[p.image_id], -1.0, overlaps)
        col = int(np.argmax(cand))
        if cand[col] >= iou_threshold:
            taken[p.image_id][col] = True
            tp[rank] = 1.0

    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_average_precision(
    predictions: Sequence[Detection], gt: Sequence[GroundTruthAnnotation], iou_threshold: float = 0.5
) -> tuple[float, dict[int, float]]:
    per_category = {}
    for cat in sorted({g.category_id for g in gt}):
        ap = average_precision(predictions, gt, cat, iou_threshold)
        if ap is not None:
            per_category[cat] = ap
    mean = float(np.mean(list(per_category.values()))) if per_category else 0.0
    return mean, per_category
