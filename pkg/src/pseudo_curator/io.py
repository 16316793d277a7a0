"""Readers and writers for the on-disk formats.

* detections: JSON array of ``{image_id, category_id, bbox: [x, y, w, h], score}``
* ground truth: COCO-style ``{"images", "annotations", "categories"}``
* RoI features: JSON Lines ``{roi_id, image_id, bbox, is_positive, feature}``
* weight sidecar: CSV ``roi_id,image_id,iou_max,D,weight``
* embedding: ``"dim_out dim_in"`` header, then one row per line
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import ParseError
from .geometry import BoundingBox, Detection, GroundTruthAnnotation
from .reweight import RoiFeatureRecord, RoiWeightRow, RoiWeightTable

WEIGHT_COLUMNS = ["roi_id", "image_id", "iou_max", "D", "weight"]


@dataclass
class GroundTruthSet:
    image_ids: list[int]
    annotations: list[GroundTruthAnnotation]
    categories: list[dict] = field(default_factory=list)
    images: list[dict] = field(default_factory=list)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_json(path: str | os.PathLike) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None


def _require(record: dict, key: str, kind, where: str):
    if not isinstance(record, dict):
        raise ParseError(f"{where}: expected an object, got {type(record).__name__}")
    if key not in record:
        raise ParseError(f"{where}: missing field '{key}'")
    value = record[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"{where}: field '{key}' must be an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ParseError(f"{where}: field '{key}' must be a finite number, got {value!r}")
        value = float(value)
    elif kind is bool:
        if not isinstance(value, bool):
            raise ParseError(f"{where}: field '{key}' must be a boolean, got {value!r}")
    return value


def _parse_bbox(record: dict, where: str) -> BoundingBox:
    raw = _require(record, "bbox", list, where)
    if not isinstance(raw, list) or len(raw) != 4:
        raise ParseError(f"{where}: field 'bbox' must be [x, y, width, height]")
    vals = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ParseError(f"{where}: non-numeric bbox entry {v!r}")
        vals.append(float(v))
    if vals[2] < 0 or vals[3] < 0:
        raise ParseError(f"{where}: negative bbox width/height {vals[2:]}")
    return BoundingBox.from_xywh(*vals)


def _extent(lo: float, hi: float) -> float:
    """A width ``w`` with ``lo + w == hi`` when one exists near ``hi - lo``,
    so corners survive the xywh round trip bit for bit."""
    w = hi - lo
    if lo + w == hi:
        return w
    for direction in (math.inf, -math.inf):
        cand = w
        for _ in range(4):
            cand = math.nextafter(cand, direction)
            if cand >= 0 and lo + cand == hi:
                return cand
    return w


def _bbox_out(box: BoundingBox) -> list[float]:
    x0, y0, x1, y1 = (float(v) for v in box.as_tuple())
    return [x0, y0, _extent(x0, x1), _extent(y0, y1)]


# detections -----------------------------------------------------------------

def detection_from_dict(record: dict, where: str) -> Detection:
    box = _parse_bbox(record, where)
    score = _require(record, "score", float, where)
    if not 0.0 <= score <= 1.0:
        raise ParseError(f"{where}: score {score} outside [0, 1]")
    category = _require(record, "category_id", int, where)
    if category < 0:
        raise ParseError(f"{where}: negative category_id {category}")
    return Detection(box, category, score, _require(record, "image_id", int, where))


def detection_to_dict(det: Detection) -> dict:
    return {
        "image_id": int(det.image_id),
        "category_id": int(det.category_id),
        "bbox": _bbox_out(det.box),
        "score": float(det.score),
    }


def load_detections(path: str | os.PathLike) -> list[Detection]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: detection file must hold a JSON array")
    return [detection_from_dict(rec, f"{path}[{i}]") for i, rec in enumerate(data)]


def dumps_detections(dets: Iterable[Detection]) -> str:
    body = ",\n".join(json.dumps(detection_to_dict(d), sort_keys=True) for d in dets)
    return "[\n" + body + "\n]\n" if body else "[]\n"


def write_detections(path: str | os.PathLike, dets: Iterable[Detection]) -> None:
    atomic_write_text(path, dumps_detections(dets))


# ground truth ---------------------------------------------------------------

def load_ground_truth(path: str | os.PathLike) -> GroundTruthSet:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise ParseError(f"{path}: ground-truth file must hold a JSON object")
    for key in ("images", "annotations"):
        if not isinstance(data.get(key), list):
            raise ParseError(f"{path}: missing or non-list '{key}'")
    images = data["images"]
    image_ids = [_require(img, "id", int, f"{path}:images[{i}]") for i, img in enumerate(images)]
    known = set(image_ids)
    anns = []
    for i, rec in enumerate(data["annotations"]):
        where = f"{path}:annotations[{i}]"
        _require(rec, "id", int, where)
        image_id = _require(rec, "image_id", int, where)
        if image_id not in known:
            raise ParseError(f"{where}: image_id {image_id} not listed in 'images'")
        anns.append(GroundTruthAnnotation(_parse_bbox(rec, where), _require(rec, "category_id", int, where), image_id))
    categories = data.get("categories", [])
    if not isinstance(categories, list):
        raise ParseError(f"{path}: 'categories' must be a list")
    return GroundTruthSet(sorted(image_ids), anns, categories, images)


def ground_truth_document(
    image_ids: Sequence[int],
    annotations: Sequence[GroundTruthAnnotation | Detection],
    categories: Sequence[dict] | None = None,
    images: Sequence[dict] | None = None,
) -> dict:
    """COCO-style document; ``Detection`` entries keep their score."""
    if images is None:
        images = [{"id": int(i)} for i in image_ids]
    anns = []
    for n, a in enumerate(annotations, start=1):
        box = a.box
        rec = {
            "id": n,
            "image_id": int(a.image_id),
            "category_id": int(a.category_id),
            "bbox": _bbox_out(box),
            "area": float(box.area),
            "iscrowd": 0,
        }
        if isinstance(a, Detection):
            rec["score"] = float(a.score)
        anns.append(rec)
    if categories is None:
        categories = [{"id": c, "name": f"class_{c}"} for c in sorted({a.category_id for a in annotations})]
    return {"images": list(images), "annotations": anns, "categories": list(categories)}


def write_ground_truth(path: str | os.PathLike, document: dict) -> None:
    atomic_write_text(path, dump_json(document))


# RoI features ---------------------------------------------------------------

def load_roi_features(path: str | os.PathLike) -> list[RoiFeatureRecord]:
    rois = []
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: invalid JSON ({exc.msg})") from None
            feature = _require(rec, "feature", list, where)
            if not isinstance(feature, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in feature
            ):
                raise ParseError(f"{where}: 'feature' must be a list of finite numbers")
            if dim is None:
                dim = len(feature)
            elif len(feature) != dim:
                raise ParseError(f"{where}: feature length {len(feature)} differs from first record's {dim}")
            rois.append(
                RoiFeatureRecord(
                    _require(rec, "roi_id", int, where),
                    _require(rec, "image_id", int, where),
                    _parse_bbox(rec, where),
                    _require(rec, "is_positive", bool, where),
                    np.array(feature, dtype=np.float64),
                )
            )
    return rois


def dumps_roi_features(rois: Iterable[RoiFeatureRecord]) -> str:
    lines = []
    for r in rois:
        lines.append(
            json.dumps(
                {
                    "roi_id": int(r.roi_id),
                    "image_id": int(r.image_id),
                    "bbox": _bbox_out(r.box),
                    "is_positive": bool(r.is_positive),
                    "feature": [float(v) for v in r.feature],
                },
                sort_keys=True,
            )
        )
    return "".join(line + "\n" for line in lines)


def write_roi_features(path: str | os.PathLike, rois: Iterable[RoiFeatureRecord]) -> None:
    atomic_write_text(path, dumps_roi_features(rois))


# weight sidecar -------------------------------------------------------------

def _g9(x: float) -> str:
    return f"{x:.9g}"


def dumps_weight_table(table: RoiWeightTable) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(WEIGHT_COLUMNS)
    for r in table.rows:
        writer.writerow([r.roi_id, r.image_id, _g9(r.iou_max), _g9(r.D), _g9(r.weight)])
    return buf.getvalue()


def write_weight_table(path: str | os.PathLike, table: RoiWeightTable) -> None:
    atomic_write_text(path, dumps_weight_table(table))


def load_weight_table(path: str | os.PathLike) -> RoiWeightTable:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != WEIGHT_COLUMNS:
            raise ParseError(f"{path}:1: expected header {','.join(WEIGHT_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 columns, got {len(rec)}")
            try:
                rows.append(RoiWeightRow(int(rec[0]), int(rec[1]), float(rec[2]), float(rec[3]), float(rec[4])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return RoiWeightTable(tuple(rows))


# embedding ------------------------------------------------------------------

def dumps_embedding(matrix: EmbeddingMatrix | np.ndarray) -> str:
    W = matrix.W if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix, dtype=np.float64)
    lines = [f"{W.shape[0]} {W.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in W]
    return "\n".join(lines) + "\n"


def write_embedding(path: str | os.PathLike, matrix: EmbeddingMatrix | np.ndarray) -> None:
    atomic_write_text(path, dumps_embedding(matrix))


def load_embedding(path: str | os.PathLike) -> EmbeddingMatrix:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"{path}: file not found") from None
    lines = text.splitlines()
    try:
        rows_n, cols_n = (int(v) for v in lines[0].split())
    except (IndexError, ValueError):
        raise ParseError(f"{path}:1: header must be 'dim_out dim_in'") from None
    if len(lines) - 1 < rows_n:
        raise ParseError(f"{path}: expected {rows_n} rows, found {len(lines) - 1}")
    W = np.zeros((rows_n, cols_n))
    for r in range(rows_n):
        parts = lines[r + 1].split()
        if len(parts) != cols_n:
            raise ParseError(f"{path}:{r + 2}: expected {cols_n} values, got {len(parts)}")
        try:
            W[r] = [float(v) for v in parts]
        except ValueError as exc:
            raise ParseError(f"{path}:{r + 2}: {exc}") from None
    try:
        return EmbeddingMatrix(W)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def load_image_ids(path: str | os.PathLike) -> list[int]:
    """Image universe from a JSON list of ids or a COCO-style ``images`` list."""
    data = _load_json(path)
    if isinstance(data, dict):
        data = data.get("images")
        if not isinstance(data, list):
            raise ParseError(f"{path}: expected an 'images' list")
        return sorted(_require(img, "id", int, f"{path}:images[{i}]") for i, img in enumerate(data))
    if isinstance(data, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in data):
        return sorted(data)
    raise ParseError(f"{path}: expected a list of integer image ids")
