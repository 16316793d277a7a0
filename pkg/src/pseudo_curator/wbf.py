"""Weighted boxes fusion across the detections of several models."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Sequence, Union

from ._parallel import parallel_map
from .errors import ValidationError
from .geometry import BoundingBox, Detection, ImagePseudoLabels, iou

RescaleMode = Literal["count_over_models", "none"]


@dataclass(frozen=True)
class WbfConfig:
    cluster_iou_threshold: float = 0.55
    model_weights: tuple[float, ...] | None = None
    rescale_mode: RescaleMode = "count_over_models"

    def __post_init__(self) -> None:
        if not 0.0 < self.cluster_iou_threshold <= 1.0:
            raise ValueError("cluster_iou_threshold must be in (0, 1]")
        if self.model_weights is not None:
            object.__setattr__(self, "model_weights", tuple(float(w) for w in self.model_weights))
            if any(w <= 0 for w in self.model_weights):
                raise ValueError("model weights must be positive")
        if self.rescale_mode not in ("count_over_models", "none"):
            raise ValueError(f"unknown rescale_mode {self.rescale_mode!r}")

    def weights_for(self, num_models: int) -> tuple[float, ...]:
        if self.model_weights is None:
            return (1.0,) * num_models
        if len(self.model_weights) != num_models:
            raise ValidationError(
                f"{len(self.model_weights)} model weights given for {num_models} models"
            )
        return self.model_weights


class _Cluster:
    __slots__ = ("members", "box")

    def __init__(self, det: Detection, weight: float):
        self.members = [(det, weight)]
        self.box = det.box

    def add(self, det: Detection, weight: float) -> None:
        self.members.append((det, weight))
        self.box = _weighted_box(self.members)


def _weighted_box(members: Sequence[tuple[Detection, float]]) -> BoundingBox:
    coeffs = [w * d.score for d, w in members]
    total = sum(coeffs)
    if total <= 0:
        coeffs = [w for _, w in members]
        total = sum(coeffs)
    coords = [
        sum(c * d.box.as_tuple()[k] for c, (d, _) in zip(coeffs, members)) / total for k in range(4)
    ]
    # guard against x_max < x_min by one ulp after averaging
    return BoundingBox(coords[0], coords[1], max(coords[0], coords[2]), max(coords[1], coords[3]))


def _sort_key(entry: tuple[Detection, float]) -> tuple:
    det, w = entry
    return (-(w * det.score), det.box.as_tuple(), -det.score, w)


def fuse_image(per_model: Sequence[Sequence[Detection]], cfg: WbfConfig = WbfConfig()) -> list[Detection]:
    """Fuse one image's detections from ``len(per_model)`` models."""
    if not per_model:
        raise ValidationError("fuse_image needs at least one model")
    num_models = len(per_model)
    weights = cfg.weights_for(num_models)

    by_category: dict[int, list[tuple[Detection, float]]] = defaultdict(list)
    image_ids = set()
    for dets, w in zip(per_model, weights):
        for d in dets:
            by_category[d.category_id].append((d, w))
            image_ids.add(d.image_id)
    if len(image_ids) > 1:
        raise ValidationError(f"fuse_image got detections from images {sorted(image_ids)}")

    fused = []
    for category in sorted(by_category):
        clusters: list[_Cluster] = []
        for det, w in sorted(by_category[category], key=_sort_key):
            for cluster in clusters:
                if iou(cluster.box, det.box) >= cfg.cluster_iou_threshold:
                    cluster.add(det, w)
                    break
            else:
                clusters.append(_Cluster(det, w))
        for cluster in clusters:
            members = cluster.members
            score = sum(w * d.score for d, w in members) / sum(w for _, w in members)
            if cfg.rescale_mode == "count_over_models":
                score *= min(len(members), num_models) / num_models
            fused.append(Detection(cluster.box, category, min(1.0, score), members[0][0].image_id))

    fused.sort(key=lambda d: (-d.score, d.category_id, d.box.as_tuple()))
    return fused


ModelOutput = Union[
    Mapping[int, Sequence[Detection]], Sequence[ImagePseudoLabels], Sequence[Detection]
]


def group_by_image(output: ModelOutput) -> dict[int, list[Detection]]:
    if isinstance(output, Mapping):
        return {int(k): list(v) for k, v in output.items()}
    grouped: dict[int, list[Detection]] = defaultdict(list)
    for item in output:
        if isinstance(item, ImagePseudoLabels):
            grouped[item.image_id].extend(item.detections)
        else:
            grouped[item.image_id].append(item)
    return dict(grouped)


def fuse_dataset(per_model_files: Sequence[ModelOutput], cfg: WbfConfig = WbfConfig()) -> dict[int, list[Detection]]:
    """Apply :func:`fuse_image` to every image seen by any model.

    A model missing an image contributes nothing there but still counts
    towards the model total used for rescaling.
    """
    if not per_model_files:
        raise ValidationError("fuse_dataset needs at least one model")
    grouped = [group_by_image(m) for m in per_model_files]
    image_ids = sorted(set().union(*grouped))
    fused = parallel_map(lambda img: fuse_image([g.get(img, []) for g in grouped], cfg), image_ids)
    return dict(zip(image_ids, fused))


def flatten(grouped: Mapping[int, Iterable[Detection]]) -> list[Detection]:
    return [d for img in sorted(grouped) for d in grouped[img]]
