"""Command-line entry point: ``pseudo-curator <command> ...``.

Failures exit nonzero and print one JSON object ``{"error": <category>,
"message": <text>}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import io as fio
from . import pipeline
from .embedding import EmbedConfig, train_embedding
from .errors import CuratorError, ValidationError
from .evaluation import difficulty_summary, mean_average_precision
from .intersection import IntersectionConfig
from .pseudo_labels import CategoryThresholds, make_pseudo_labels
from .reweight import ReweightConfig, build_weight_table
from .synthgen import SynthConfig, generate
from .wbf import WbfConfig, flatten, fuse_dataset

EXIT_CODES = {"usage": 2, "parse": 3, "validation": 4, "state": 5, "lock": 6, "io": 7}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        sys.exit(EXIT_CODES["usage"])


def _add_reweight_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("re-weighting")
    g.add_argument("--a", type=float, default=ReweightConfig.a, help="weight floor for background RoIs")
    g.add_argument("--b", type=float, default=ReweightConfig.b)
    g.add_argument("--c1", type=float, default=ReweightConfig.c1, help="IoU steepness")
    g.add_argument("--c2", type=float, default=ReweightConfig.c2, help="similarity steepness")


def _add_embed_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("similarity embedding")
    g.add_argument("--iof-threshold", type=float, default=EmbedConfig.iof_threshold)
    g.add_argument("--embed-dim", type=int, default=None)
    g.add_argument("--learning-rate", type=float, default=EmbedConfig.learning_rate)
    g.add_argument("--epochs", type=int, default=EmbedConfig.epochs)
    g.add_argument("--max-pairs-per-image", type=int, default=EmbedConfig.max_pairs_per_image)


def _add_wbf_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("weighted boxes fusion")
    g.add_argument("--cluster-iou", type=float, default=WbfConfig.cluster_iou_threshold)
    g.add_argument("--model-weights", type=float, nargs="+", default=None)
    g.add_argument("--rescale", choices=["count_over_models", "none"], default="count_over_models")


def _reweight_cfg(args) -> ReweightConfig:
    return ReweightConfig(args.a, args.b, args.c1, args.c2)


def _embed_cfg(args) -> EmbedConfig:
    return EmbedConfig(
        iof_threshold=args.iof_threshold,
        embed_dim=args.embed_dim,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        max_pairs_per_image=args.max_pairs_per_image,
        rng_seed=args.seed,
    )


def _wbf_cfg(args) -> WbfConfig:
    return WbfConfig(args.cluster_iou, tuple(args.model_weights) if args.model_weights else None, args.rescale)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_init(args) -> None:
    manifest = pipeline.init_pipeline(
        args.phases,
        args.fs_predictions,
        args.labeled_gt,
        args.out,
        fs_test_prediction_file=args.fs_test_predictions,
        unlabeled_images_file=args.unlabeled_images,
        seed=args.seed,
        intersection=IntersectionConfig(args.match_iou, args.score_combine),
        reweight=_reweight_cfg(args),
        embed=_embed_cfg(args),
    )
    _print(pipeline.status(manifest))


def cmd_select(args) -> None:
    manifest = pipeline.step_select(pipeline.load_manifest(args.manifest))
    _print(pipeline.status(manifest))


def cmd_emit(args) -> None:
    manifest = pipeline.step_emit(
        pipeline.load_manifest(args.manifest),
        args.roi_features,
        embedding_file=args.embedding,
        train_similarity=not args.no_train_embedding,
        use_embedding=not args.raw_features,
    )
    _print(pipeline.status(manifest))


def cmd_register(args) -> None:
    manifest = pipeline.register_predictions(
        pipeline.load_manifest(args.manifest),
        args.phase,
        args.predictions,
        args.test_predictions,
        allow_missing=args.allow_missing,
    )
    _print(pipeline.status(manifest))


def cmd_ensemble(args) -> None:
    cfg = _wbf_cfg(args)
    if args.manifest:
        out = pipeline.finalize(pipeline.load_manifest(args.manifest), cfg, args.test_gt)
        _print({"final_detections": out})
        return
    if not args.inputs or not args.output:
        raise ValidationError("ensemble needs --manifest, or --inputs and --output")
    fused = flatten(fuse_dataset([fio.load_detections(p) for p in args.inputs], cfg))
    fio.write_detections(args.output, fused)
    _print({"final_detections": str(args.output), "count": len(fused)})


def cmd_evaluate(args) -> None:
    gt = fio.load_ground_truth(args.gt)
    dets = fio.load_detections(args.predictions)
    labels = make_pseudo_labels(dets, CategoryThresholds({}, args.score_threshold), gt.image_ids)
    kept = [d for l in labels for d in l.detections]
    summary = difficulty_summary(labels, gt.annotations, args.iou_threshold, args.margin)
    mean, per_cat = mean_average_precision(kept, gt.annotations, args.iou_threshold)
    report = {
        "easy_fraction": summary.easy_fraction,
        "mAP": mean,
        "AP": {str(k): v for k, v in per_cat.items()},
        "images": [asdict(r) for r in summary.reports],
    }
    if args.output:
        fio.atomic_write_text(args.output, fio.dump_json(report))
        _print({"easy_fraction": summary.easy_fraction, "mAP": mean, "report": str(args.output)})
    else:
        _print(report)


def cmd_reweight(args) -> None:
    rois = fio.load_roi_features(args.roi_features)
    matrix = fio.load_embedding(args.embedding).W if args.embedding else None
    table = build_weight_table(rois, _reweight_cfg(args), matrix)
    fio.write_weight_table(args.output, table)
    _print({"rows": len(table), "sidecar": str(args.output)})


def cmd_embed(args) -> None:
    rois = fio.load_roi_features(args.roi_features)
    matrix = train_embedding(rois, _embed_cfg(args))
    fio.write_embedding(args.output, matrix)
    losses = matrix.losses
    _print(
        {
            "embedding": str(args.output),
            "shape": list(matrix.shape),
            "initial_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None,
            "warning": matrix.warning,
        }
    )


def cmd_synth(args) -> None:
    cfg = SynthConfig(
        rng_seed=args.seed,
        num_images=args.num_images,
        image_id_offset=args.image_id_offset,
        num_models=args.num_models,
        easy_fraction_true=args.easy_fraction,
        easy_score_mean=args.easy_score_mean,
        difficult_score_mean=args.difficult_score_mean,
        score_sigma=args.score_sigma,
        feature_dim=args.feature_dim,
    )
    data = generate(cfg)
    out = Path(args.out)
    categories = [{"id": c, "name": n} for c, n in sorted(data.category_names.items())]
    fio.write_ground_truth(out / "gt.json", fio.ground_truth_document(data.image_ids, data.ground_truth, categories))
    for m, dets in enumerate(data.model_detections):
        fio.write_detections(out / f"model_{m}.json", dets)
    fio.write_roi_features(out / "rois.jsonl", data.rois)
    fio.atomic_write_text(out / "easy_ids.json", fio.dump_json(data.easy_image_ids))
    _print({"out": str(out), "images": len(data.image_ids), "models": cfg.num_models})


def cmd_status(args) -> None:
    _print(pipeline.status(pipeline.load_manifest(args.manifest)))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudo-curator", description="Curate pseudo labels over a multi-phase self-training schedule.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="start a multi-phase run")
    p.add_argument("--phases", type=int, required=True)
    p.add_argument("--fs-predictions", required=True, help="fully-supervised model on unlabeled images")
    p.add_argument("--fs-test-predictions", help="fully-supervised model on test images")
    p.add_argument("--labeled-gt", required=True)
    p.add_argument("--unlabeled-images", help="JSON id list or COCO images file (default: ids in --fs-predictions)")
    p.add_argument("--out", "--manifest", dest="out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--match-iou", type=float, default=IntersectionConfig.match_iou_threshold)
    p.add_argument("--score-combine", choices=["min", "geometric_mean"], default="min")
    _add_reweight_flags(p)
    _add_embed_flags(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("select", help="intersect pseudo labels and pick easy images")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("emit", help="write the phase training set and weight sidecar")
    p.add_argument("--manifest", required=True)
    p.add_argument("--roi-features")
    p.add_argument("--embedding", help="use this embedding instead of training one")
    p.add_argument("--no-train-embedding", action="store_true")
    p.add_argument("--raw-features", action="store_true", help="compare raw features even with an embedding")
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("register", help="hand back a trained phase model's predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--phase", type=int, required=True)
    p.add_argument("--predictions", required=True, help="predictions on the unlabeled images")
    p.add_argument("--test-predictions")
    p.add_argument("--allow-missing", action="store_true", help="accept images without any detection")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("ensemble", help="fuse model predictions")
    p.add_argument("--manifest")
    p.add_argument("--test-gt")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--output")
    _add_wbf_flags(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="recall/precision difficulty report and AP@IoU")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--score-threshold", type=float, default=0.0)
    p.add_argument("--margin", type=float, default=0.0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reweight", help="compute the RoI weight sidecar")
    p.add_argument("--roi-features", required=True)
    p.add_argument("--embedding")
    p.add_argument("--output", required=True)
    _add_reweight_flags(p)
    p.set_defaults(func=cmd_reweight)

    p = sub.add_parser("embed", help="train the similarity embedding")
    p.add_argument("--roi-features", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_embed_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-images", type=int, default=100)
    p.add_argument("--image-id-offset", type=int, default=0)
    p.add_argument("--num-models", type=int, default=1)
    p.add_argument("--easy-fraction", type=float, default=SynthConfig.easy_fraction_true)
    p.add_argument("--easy-score-mean", type=float, default=SynthConfig.easy_score_mean)
    p.add_argument("--difficult-score-mean", type=float, default=SynthConfig.difficult_score_mean)
    p.add_argument("--score-sigma", type=float, default=SynthConfig.score_sigma)
    p.add_argument("--feature-dim", type=int, default=SynthConfig.feature_dim)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("status", help="show manifest state")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_status)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except CuratorError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except ValueError as exc:
        print(json.dumps({"error": "validation", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["validation"]
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
