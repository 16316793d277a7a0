"""Resumable multi-phase pseudo-labelling schedule persisted as a manifest.

Phase ``i`` of ``N`` selects the easiest ``ceil(i/N * n)`` unlabeled images by
mean pseudo-label confidence, where the pseudo labels are the consensus of
every model registered so far (the fully-supervised model is phase 0).  The
detector itself is trained outside this package: ``step_emit`` writes the
training inputs and ``register_predictions`` takes the trained model's
predictions back.

Each public operation holds ``manifest.lock`` for its duration and persists
the manifest with write-temp-then-rename, so an interrupted run resumes from
the last completed transition.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

from . import io as fio
from .embedding import EmbedConfig, train_embedding
from .errors import LockError, ParseError, StateError, ValidationError
from .evaluation import difficulty_summary, mean_average_precision
from .intersection import IntersectionConfig, intersect_all
from .pseudo_labels import CategoryThresholds, fit_category_thresholds, make_pseudo_labels, select_easy
from .reweight import ReweightConfig, build_weight_table
from .wbf import WbfConfig, flatten, fuse_dataset

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = "manifest.lock"
STATUSES = ("pending", "selected", "emitted", "trained", "predicted")


@dataclass
class ModelRecord:
    phase: int
    unlabeled_predictions: str
    test_predictions: str | None = None


@dataclass
class PhaseRecord:
    phase: int
    fraction_k: float
    status: str = "pending"
    prediction_files: list[str] = field(default_factory=list)
    selected_image_ids: list[int] = field(default_factory=list)
    consensus_path: str | None = None
    selection_path: str | None = None
    training_set_path: str | None = None
    pseudo_label_path: str | None = None
    weight_sidecar_path: str | None = None
    embedding_path: str | None = None
    warnings: list[str] = field(default_factory=list)


@dataclass
class PhaseManifest:
    out_dir: str
    num_phases: int
    current_phase: int
    fraction_k: float
    seed: int
    labeled_gt: str
    unlabeled_image_ids: list[int]
    models: list[ModelRecord]
    phases: list[PhaseRecord]
    intersection: dict = field(default_factory=lambda: asdict(IntersectionConfig()))
    reweight: dict = field(default_factory=lambda: asdict(ReweightConfig()))
    embed: dict = field(default_factory=lambda: asdict(EmbedConfig()))
    final_detections: str | None = None
    final_report: str | None = None

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / MANIFEST_NAME

    def phase(self, index: int) -> PhaseRecord:
        if not 1 <= index <= self.num_phases:
            raise StateError(f"phase {index} outside 1..{self.num_phases}")
        return self.phases[index - 1]

    @property
    def complete(self) -> bool:
        return all(p.status == "predicted" for p in self.phases)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseManifest":
        data = dict(data)
        data["models"] = [ModelRecord(**m) for m in data["models"]]
        data["phases"] = [PhaseRecord(**p) for p in data["phases"]]
        return cls(**data)


def save_manifest(manifest: PhaseManifest) -> None:
    fio.atomic_write_text(manifest.path, fio.dump_json(manifest.to_dict()))


def load_manifest(location: str | os.PathLike) -> PhaseManifest:
    path = Path(location)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid manifest JSON ({exc.msg})") from None
    try:
        manifest = PhaseManifest.from_dict(data)
    except (TypeError, KeyError) as exc:
        raise ParseError(f"{path}: malformed manifest ({exc})") from None
    manifest.out_dir = str(path.parent)
    return manifest


@contextmanager
def manifest_lock(out_dir: str | os.PathLike) -> Iterator[None]:
    lock = Path(out_dir) / LOCK_NAME
    lock.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"{lock} exists: another command is using this manifest "
            "(delete the lock file if that process is gone)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(lock)
        except FileNotFoundError:
            pass


def _resolve(path: str | os.PathLike) -> str:
    return str(Path(path).resolve())


def _check_universe(dets, universe: set[int], path: str, allow_missing: bool = False) -> None:
    seen = {d.image_id for d in dets}
    extras = sorted(seen - universe)
    missing = [] if allow_missing else sorted(universe - seen)
    if extras or missing:
        raise ValidationError(
            f"{path}: image ids do not match the unlabeled universe; extra {extras}, missing {missing}"
        )


def init_pipeline(
    num_phases: int,
    fs_prediction_file: str | os.PathLike,
    labeled_gt_file: str | os.PathLike,
    out_dir: str | os.PathLike,
    *,
    fs_test_prediction_file: str | os.PathLike | None = None,
    unlabeled_images_file: str | os.PathLike | None = None,
    seed: int = 0,
    intersection: IntersectionConfig = IntersectionConfig(),
    reweight: ReweightConfig = ReweightConfig(),
    embed: EmbedConfig | None = None,
) -> PhaseManifest:
    if num_phases < 1:
        raise ValidationError("num_phases must be at least 1")
    out_dir = Path(out_dir)
    if (out_dir / MANIFEST_NAME).exists():
        raise StateError(f"{out_dir / MANIFEST_NAME} already exists; refusing to overwrite")

    gt = fio.load_ground_truth(labeled_gt_file)
    if not gt.image_ids:
        raise ValidationError(f"{labeled_gt_file}: no labeled images")
    fs_dets = fio.load_detections(fs_prediction_file)
    if unlabeled_images_file is not None:
        universe = fio.load_image_ids(unlabeled_images_file)
        _check_universe(fs_dets, set(universe), str(fs_prediction_file), allow_missing=True)
    else:
        universe = sorted({d.image_id for d in fs_dets})
    if not universe:
        raise ValidationError("the unlabeled image set is empty")
    if fs_test_prediction_file is not None:
        fio.load_detections(fs_test_prediction_file)

    embed = embed or EmbedConfig(rng_seed=seed)
    phases = [PhaseRecord(i, i / num_phases) for i in range(1, num_phases + 1)]
    fs_model = ModelRecord(
        0,
        _resolve(fs_prediction_file),
        _resolve(fs_test_prediction_file) if fs_test_prediction_file else None,
    )
    phases[0].prediction_files = [fs_model.unlabeled_predictions]
    manifest = PhaseManifest(
        out_dir=str(out_dir.resolve()),
        num_phases=num_phases,
        current_phase=1,
        fraction_k=1 / num_phases,
        seed=seed,
        labeled_gt=_resolve(labeled_gt_file),
        unlabeled_image_ids=universe,
        models=[fs_model],
        phases=phases,
        intersection=asdict(intersection),
        reweight=asdict(reweight),
        embed=asdict(embed),
    )
    with manifest_lock(out_dir):
        save_manifest(manifest)
    return manifest


def consensus_pseudo_labels(manifest: PhaseManifest, model_files: list[str]):
    """Threshold each model's predictions, then intersect them in phase order.

    Returns ``(consensus, thresholds_per_model)``.
    """
    gt = fio.load_ground_truth(manifest.labeled_gt)
    universe = manifest.unlabeled_image_ids
    universe_set = set(universe)
    per_model = []
    thresholds = []
    for path in model_files:
        if not Path(path).exists():
            raise StateError(f"prediction file {path} is missing")
        dets = [d for d in fio.load_detections(path) if d.image_id in universe_set]
        thr = fit_category_thresholds(gt.annotations, dets, len(gt.image_ids), len(universe))
        thresholds.append(thr)
        per_model.append(make_pseudo_labels(dets, thr, universe))
    consensus = intersect_all(per_model, IntersectionConfig(**manifest.intersection))
    return consensus, thresholds


def step_select(manifest: PhaseManifest) -> PhaseManifest:
    manifest = copy.deepcopy(manifest)
    with manifest_lock(manifest.out_dir):
        i = manifest.current_phase
        record = manifest.phase(i)
        if record.status != "pending":
            raise StateError(f"phase {i} is '{record.status}', select needs 'pending'")
        expected = [m.unlabeled_predictions for m in manifest.models if m.phase < i]
        if len(expected) != i:
            raise StateError(f"phase {i} needs predictions from models 0..{i - 1}; have {len(expected)}")
        record.prediction_files = expected

        consensus, thresholds = consensus_pseudo_labels(manifest, expected)
        selection = select_easy(consensus, record.fraction_k)

        phase_dir = Path(manifest.out_dir) / f"phase_{i}"
        record.consensus_path = str(phase_dir / "consensus.json")
        record.selection_path = str(phase_dir / "selection.json")
        fio.write_detections(record.consensus_path, [d for l in consensus for d in l.detections])
        fio.atomic_write_text(
            record.selection_path,
            fio.dump_json(
                {
                    "phase": i,
                    "fraction_k": record.fraction_k,
                    "easy_image_ids": selection.easy_image_ids,
                    "difficult_image_ids": selection.difficult_image_ids,
                    "uncertainty": {str(l.image_id): l.uncertainty_score for l in consensus},
                    "thresholds": [t.to_dict() for t in thresholds],
                }
            ),
        )
        record.selected_image_ids = selection.easy_image_ids
        record.status = "selected"
        save_manifest(manifest)
    return manifest


def step_emit(
    manifest: PhaseManifest,
    roi_feature_file: str | os.PathLike | None = None,
    *,
    embedding_file: str | os.PathLike | None = None,
    train_similarity: bool = True,
    use_embedding: bool = True,
) -> PhaseManifest:
    """Write the phase training set and, given RoI features, the weight sidecar.

    With features, an embedding is loaded from ``embedding_file`` or trained
    (``train_similarity``) and, when ``use_embedding``, applied before the
    similarity term.  Re-running on an emitted phase rewrites identical bytes.
    """
    manifest = copy.deepcopy(manifest)
    with manifest_lock(manifest.out_dir):
        i = manifest.current_phase
        record = manifest.phase(i)
        if record.status not in ("selected", "emitted"):
            raise StateError(f"phase {i} is '{record.status}', emit needs 'selected'")
        warnings: list[str] = []
        selected = set(record.selected_image_ids)
        phase_dir = Path(manifest.out_dir) / f"phase_{i}"

        pseudo = [d for d in fio.load_detections(record.consensus_path) if d.image_id in selected]
        gt = fio.load_ground_truth(manifest.labeled_gt)
        overlap = sorted(set(gt.image_ids) & selected)
        if overlap:
            raise ValidationError(f"selected unlabeled images {overlap} are also labeled images")
        images = list(gt.images) + [{"id": img} for img in record.selected_image_ids]
        document = fio.ground_truth_document(
            gt.image_ids + record.selected_image_ids,
            list(gt.annotations) + pseudo,
            gt.categories or None,
            images,
        )
        record.training_set_path = str(phase_dir / "train.json")
        record.pseudo_label_path = str(phase_dir / "pseudo_labels.json")
        fio.write_ground_truth(record.training_set_path, document)
        fio.write_detections(record.pseudo_label_path, pseudo)

        record.weight_sidecar_path = None
        record.embedding_path = None
        if roi_feature_file is None:
            warnings.append("no RoI feature file supplied; weight sidecar not written")
        else:
            rois = fio.load_roi_features(roi_feature_file)
            feature_images = {r.image_id for r in rois}
            unknown = sorted(feature_images - set(manifest.unlabeled_image_ids))
            uncovered = sorted(selected - feature_images)
            if unknown or uncovered:
                raise ValidationError(
                    f"{roi_feature_file}: RoI features do not match pseudo-labelled images; "
                    f"not unlabeled {unknown}, selected without features {uncovered}"
                )
            rois = [r for r in rois if r.image_id in selected]
            matrix = None
            if embedding_file is not None:
                matrix = fio.load_embedding(embedding_file)
            elif train_similarity:
                cfg = EmbedConfig(**{**manifest.embed, "rng_seed": manifest.seed})
                try:
                    matrix = train_embedding(rois, cfg)
                except ValidationError as exc:
                    warnings.append(f"similarity embedding not trained: {exc}")
                if matrix is not None and matrix.warning:
                    warnings.append(matrix.warning)
            if matrix is not None:
                record.embedding_path = str(phase_dir / "embedding.txt")
                fio.write_embedding(record.embedding_path, matrix)
            table = build_weight_table(
                rois,
                ReweightConfig(**manifest.reweight),
                matrix.W if (matrix is not None and use_embedding) else None,
            )
            record.weight_sidecar_path = str(phase_dir / "roi_weights.csv")
            fio.write_weight_table(record.weight_sidecar_path, table)

        for w in warnings:
            logger.warning("phase %d: %s", i, w)
        record.warnings = warnings
        record.status = "emitted"
        save_manifest(manifest)
    return manifest


def mark_trained(manifest: PhaseManifest, phase: int) -> PhaseManifest:
    manifest = copy.deepcopy(manifest)
    with manifest_lock(manifest.out_dir):
        record = manifest.phase(phase)
        if record.status != "emitted":
            raise StateError(f"phase {phase} is '{record.status}', expected 'emitted'")
        record.status = "trained"
        save_manifest(manifest)
    return manifest


def register_predictions(
    manifest: PhaseManifest,
    phase: int,
    prediction_file: str | os.PathLike,
    test_prediction_file: str | os.PathLike | None = None,
    *,
    allow_missing: bool = False,
) -> PhaseManifest:
    """Record the phase model's predictions on the unlabeled (and test) images."""
    manifest = copy.deepcopy(manifest)
    with manifest_lock(manifest.out_dir):
        record = manifest.phase(phase)
        if any(m.phase == phase for m in manifest.models) or record.status == "predicted":
            raise StateError(f"predictions for phase {phase} are already registered")
        if record.status not in ("emitted", "trained"):
            raise StateError(f"phase {phase} is '{record.status}', register needs 'emitted' or 'trained'")
        dets = fio.load_detections(prediction_file)
        _check_universe(dets, set(manifest.unlabeled_image_ids), str(prediction_file), allow_missing)
        if test_prediction_file is not None:
            fio.load_detections(test_prediction_file)

        manifest.models.append(
            ModelRecord(
                phase,
                _resolve(prediction_file),
                _resolve(test_prediction_file) if test_prediction_file else None,
            )
        )
        record.status = "predicted"
        if phase < manifest.num_phases:
            manifest.current_phase = phase + 1
            manifest.fraction_k = manifest.current_phase / manifest.num_phases
            manifest.phase(phase + 1).prediction_files = [m.unlabeled_predictions for m in manifest.models]
        save_manifest(manifest)
    return manifest


def finalize(
    manifest: PhaseManifest,
    wbf_cfg: WbfConfig = WbfConfig(),
    test_gt_file: str | os.PathLike | None = None,
) -> str:
    """Fuse the test predictions of every model (phase 0 included).

    Returns the path of the fused detection file; with ``test_gt_file`` a
    report with AP@0.5 per model and for the ensemble is written alongside.
    """
    with manifest_lock(manifest.out_dir):
        incomplete = [p.phase for p in manifest.phases if p.status != "predicted"]
        if incomplete:
            raise StateError(f"phases {incomplete} have no registered predictions yet")
        missing = [m.phase for m in manifest.models if not m.test_predictions]
        if missing:
            raise StateError(f"models of phases {missing} have no test predictions registered")

        per_model = [fio.load_detections(m.test_predictions) for m in manifest.models]
        fused = flatten(fuse_dataset(per_model, wbf_cfg))
        out = Path(manifest.out_dir) / "final_detections.json"
        fio.write_detections(out, fused)
        manifest.final_detections = str(out)

        if test_gt_file is not None:
            gt = fio.load_ground_truth(test_gt_file)
            report = {
                "ensemble": _ap_entry(fused, gt),
                "models": {str(m.phase): _ap_entry(dets, gt) for m, dets in zip(manifest.models, per_model)},
            }
            summary = difficulty_summary(_as_labels(fused, gt.image_ids), gt.annotations)
            report["ensemble_easy_fraction"] = summary.easy_fraction
            report_path = Path(manifest.out_dir) / "final_report.json"
            fio.atomic_write_text(report_path, fio.dump_json(report))
            manifest.final_report = str(report_path)
        save_manifest(manifest)
    return str(out)


def _ap_entry(dets, gt) -> dict:
    mean, per_cat = mean_average_precision(dets, gt.annotations)
    return {"mAP50": mean, "AP50": {str(k): v for k, v in per_cat.items()}}


def _as_labels(dets, image_ids):
    return make_pseudo_labels(dets, CategoryThresholds({}, 0.0), image_ids)


def status(manifest: PhaseManifest) -> dict:
    return {
        "out_dir": manifest.out_dir,
        "num_phases": manifest.num_phases,
        "current_phase": manifest.current_phase,
        "fraction_k": manifest.fraction_k,
        "complete": manifest.complete,
        "models": [m.phase for m in manifest.models],
        "phases": [
            {
                "phase": p.phase,
                "fraction_k": p.fraction_k,
                "status": p.status,
                "selected": len(p.selected_image_ids),
                "warnings": p.warnings,
            }
            for p in manifest.phases
        ],
        "final_detections": manifest.final_detections,
    }
