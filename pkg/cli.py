"""Command-line entry point.

    python cli.py [--workdir DIR] [--config FILE] [--seed S] [-v] <command> ...

Exit codes: 0 success, 1 bad input, 2 internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from config.assumptions import APP_NAME, DEMO_TRAIN
from config.settings import RunConfig, load_run_config
from core.backends import Backends, build_backends
from core.cropmodel import (
    VARIANTS,
    BACKBONES,
    CONDITIONING_MODES,
    CropPredictor,
    candidate_grid,
    require_subject_for,
    subject_from_bbox,
)
from core.datagen import discover_sources, load_records, run_generation
from core.evalkit import (
    candidate_ranking_report,
    conditioning_sweep,
    evaluate_checkpoint,
    load_eval_manifest,
    write_sweep,
)
from core.geometry import CropRect, ImageDims
from core.pairsampler import dump_pairs
from core.qualityfilter import (
    QualityClassifier,
    QualityTrainConfig,
    filter_manifest,
    make_quality_examples,
    train_quality_classifier,
)
from core.scenegen import write_scene_corpus
from core.trainer import ABLATIONS, train
from pipeline import PipelineOptions, run_pipeline
from utils.data_loader import load_image, save_image
from utils.errors import PipelineStageError, UserInputError
from utils.log import configure_logging, get_logger
from utils.render import draw_overlay

log = get_logger(__name__)

USER_ERRORS = (UserInputError, ValueError, FileNotFoundError)


def parse_bbox(text: str) -> CropRect:
    """``"x1,y1,x2,y2"`` in normalized coordinates."""

    try:
        values = [float(part) for part in text.split(",")]
    except ValueError as exc:
        raise UserInputError(f"--subject-bbox must be four numbers 'x1,y1,x2,y2', got '{text}'.") from exc
    if len(values) != 4:
        raise UserInputError(f"--subject-bbox must be four numbers 'x1,y1,x2,y2', got '{text}'.")
    try:
        return CropRect(*values)
    except ValueError as exc:
        raise UserInputError(f"Invalid --subject-bbox: {exc}") from exc


def _emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _backends(cfg: RunConfig) -> Backends:
    b = cfg.backend
    return build_backends(
        b.kind,
        outpaint_url=b.outpaint_url,
        detect_url=b.detect_url,
        openai_model=b.caption_model,
        use_openai=b.use_openai,
        timeout=b.timeout,
        max_inflight=b.max_inflight,
        failure_rate=cfg.datagen.failure_rate,
    )


# -- commands ----------------------------------------------------------------


def cmd_scenes(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = cfg.path(args.out_dir)
    corpus = write_scene_corpus(out_dir, args.n, args.n_eval, seed=cfg.seed)
    cfg.write_resolved(out_dir)
    _emit({k: str(v) for k, v in corpus.items()})
    return 0


def cmd_generate(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = cfg.path(args.out_manifest)
    sources = discover_sources(cfg.path(args.source_dir))
    if not sources:
        raise UserInputError(f"No source images found in {cfg.path(args.source_dir)}.")
    stats = run_generation(sources, _backends(cfg), cfg.datagen, manifest, quiet=args.quiet)
    cfg.write_resolved(manifest.parent)
    _emit({"manifest": manifest, **vars(stats)})
    return 0


def cmd_filter(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = cfg.path(args.manifest)
    out = cfg.path(args.out_manifest) if args.out_manifest else manifest
    classifier = None
    if cfg.filter.classifier and cfg.filter.classifier_path:
        classifier = QualityClassifier.load(cfg.path(cfg.filter.classifier_path))
    _records, stats = filter_manifest(manifest, _backends(cfg).detector, cfg.filter, classifier, out, quiet=args.quiet)
    cfg.write_resolved(out.parent)
    _emit({"manifest": out, **stats.as_dict()})
    return 0


def cmd_train_filter(args: argparse.Namespace, cfg: RunConfig) -> int:
    out = cfg.path(args.out)
    examples = make_quality_examples(args.n, seed=cfg.seed)
    held = make_quality_examples(max(args.n // 4, 8), seed=cfg.seed + 1)
    qcfg = QualityTrainConfig(epochs=args.epochs, lr=args.lr, seed=cfg.seed)
    classifier = train_quality_classifier(examples, qcfg, quiet=args.quiet)
    scores = classifier.score([img for img, _bad in held])
    accuracy = float(np.mean((scores > classifier.threshold) == np.array([bad for _img, bad in held])))
    classifier.save(out)
    cfg.write_resolved(out.parent)
    _emit({"classifier": out, "held_out_accuracy": accuracy, "final_loss": classifier.history[-1]})
    return 0


def cmd_sample_pairs(args: argparse.Namespace, cfg: RunConfig) -> int:
    manifest = cfg.path(args.manifest)
    out_dir = cfg.path(args.out_dir)
    records = load_records(manifest)
    if not any(r.kept for r in records):
        raise UserInputError(f"{manifest} has no kept records to sample from.")
    index = dump_pairs(records, out_dir, args.n, seed=cfg.seed, root=manifest.parent)
    cfg.write_resolved(out_dir)
    _emit({"pairs": index})
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = cfg.path(args.out)
    result = train(cfg.path(args.manifest), cfg.model, cfg.train, out_dir)
    cfg.write_resolved(out_dir)
    _emit(
        {
            "checkpoint": result.checkpoint,
            "last_checkpoint": result.last_checkpoint,
            "metrics": result.metrics_path,
            "best_val": result.best_val,
        }
    )
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.ranking and not args.checkpoint:
        raise UserInputError("--ranking scores a ranking checkpoint; pass --checkpoint.")
    if not args.checkpoint and not cfg.eval.baseline:
        raise UserInputError("evaluate needs --checkpoint or --baseline.")
    out_dir = cfg.path(args.out)
    manifest = cfg.path(args.eval_manifest)
    checkpoint = cfg.path(args.checkpoint) if args.checkpoint else None
    report = evaluate_checkpoint(checkpoint, manifest, cfg.eval)
    paths = report.write(out_dir)
    payload: Dict[str, Any] = {**report.aggregates(), **paths}
    if args.ranking:
        predictor = CropPredictor.from_checkpoint(checkpoint)
        ranking = candidate_ranking_report(predictor, load_eval_manifest(manifest), candidate_grid())
        (out_dir / "ranking.json").write_text(json.dumps(ranking, indent=2), encoding="utf-8")
        payload["ranking"] = ranking
    cfg.write_resolved(out_dir)
    _emit(payload)
    return 0


def cmd_crop(args: argparse.Namespace, cfg: RunConfig) -> int:
    predictor = CropPredictor.from_checkpoint(cfg.path(args.checkpoint))
    image_path = cfg.path(args.image)
    image = load_image(image_path)
    dims = ImageDims.of(image)
    if args.subject_bbox:
        subject = subject_from_bbox(parse_bbox(args.subject_bbox), dims)
    else:
        found = _backends(cfg).detector.detect_subjects(image, cfg.datagen.class_label)
        subject = found[0].region if found else None
        if subject is None:
            log.warning("no %s detected in %s", cfg.datagen.class_label, image_path)
    require_subject_for(predictor.cfg, subject)

    prediction = predictor.predict(image, subject)
    overlay_path = cfg.path(args.out_overlay) if args.out_overlay else image_path.with_name(f"{image_path.stem}_crop.png")
    save_image(overlay_path, draw_overlay(image, prediction.crop, subject.bbox if subject is not None else None))
    cfg.write_resolved(overlay_path.parent)
    _emit(
        {
            "crop": prediction.crop.to_list(),
            "pixels": list(prediction.crop.to_pixel_box(dims)),
            "warning": prediction.warning,
            "overlay": overlay_path,
        }
    )
    return 0


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    predictor = CropPredictor.from_checkpoint(cfg.path(args.checkpoint))
    image = load_image(cfg.path(args.image))
    if args.subject_bbox:
        subject = subject_from_bbox(parse_bbox(args.subject_bbox), ImageDims.of(image))
    else:
        found = _backends(cfg).detector.detect_subjects(image, cfg.datagen.class_label)
        subject = found[0].region if found else None
    require_subject_for(predictor.cfg, subject)
    result = conditioning_sweep(predictor, image, subject, args.axis, args.values)
    out_dir = cfg.path(args.out)
    paths = write_sweep(result, out_dir)
    cfg.write_resolved(out_dir)
    _emit({**paths, "values": result.values, "areas": result.areas(), "area_correlation": result.area_correlation()})
    return 0


def cmd_pipeline(args: argparse.Namespace, cfg: RunConfig) -> int:
    opts = PipelineOptions(
        n_sources=args.n_sources,
        n_eval=args.n_eval,
        amplify=args.amplify,
        epochs=args.epochs,
        skip_train=args.skip_train,
        failure_rate=args.failure_rate,
        use_classifier=not args.no_classifier,
        quiet=args.quiet,
    )
    result = run_pipeline(cfg, cfg.path(args.out), opts)
    _emit(
        {
            "out_dir": result.out_dir,
            "checkpoint": result.checkpoint,
            "mean_iou": result.report.mean_iou,
            "mean_disp": result.report.mean_disp,
            "baseline_iou": result.baseline.mean_iou,
            "summary": result.summary_path,
        }
    )
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description="Subject-aware image cropping from outpainted data.")
    parser.add_argument("--workdir", help="Base directory for every relative path (default: config value, else .).")
    parser.add_argument("--config", help="YAML run configuration.")
    parser.add_argument("--env-file", help="Optional .env file with backend settings.")
    parser.add_argument("--seed", type=int, help="Global seed (defaults to the config value, else 0).")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG.")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenes", help="Write a synthetic source corpus and a labeled evaluation set.")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--out-dir", default="scenes")
    p.set_defaults(handler=cmd_scenes)

    p = sub.add_parser("generate", help="Outpaint sources into a dataset manifest.")
    p.add_argument("--source-dir", required=True)
    p.add_argument("--out-manifest", default="data/manifest.jsonl")
    p.add_argument("--backend", choices=("mock", "http"))
    p.add_argument("--amplify", type=int)
    p.add_argument("--class", dest="class_label")
    p.add_argument("--workers", type=int)
    p.add_argument("--failure-rate", type=float)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("filter", help="Flag records rejected by the quality filters.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-manifest")
    p.add_argument("--no-heuristic", action="store_true")
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--classifier-path")
    p.add_argument("--threshold", type=float)
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("train-filter", help="Train the bad-outpainting classifier on synthetic examples.")
    p.add_argument("--out", default="models/quality.pt")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(handler=cmd_train_filter)

    p = sub.add_parser("sample-pairs", help="Dump enclosing-view training pairs for inspection.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default="pairs")
    p.add_argument("--n", type=int, default=32)
    p.set_defaults(handler=cmd_sample_pairs)

    p = sub.add_parser("train", help="Train a cropper.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--backbone", choices=BACKBONES)
    p.add_argument("--conditioning", choices=CONDITIONING_MODES)
    p.add_argument("--ablate", nargs="*", choices=ABLATIONS)
    p.add_argument("--max-sources", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--desk", action="store_true", help="Desk-scale learning rate, warm-up and batch size.")
    p.add_argument("--out", default="runs/train")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="Score a checkpoint or a baseline on a labeled manifest.")
    p.add_argument("--checkpoint")
    p.add_argument("--eval-manifest", required=True)
    p.add_argument("--baseline", choices=("center", "oracle"))
    p.add_argument("--center-area", type=float)
    p.add_argument("--ranking", action="store_true", help="Also report SRCC/Acc_K over the candidate grid.")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("crop", help="Crop one image.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--subject-bbox", help="Normalized x1,y1,x2,y2; skips detection.")
    p.add_argument("--out-overlay")
    p.set_defaults(handler=cmd_crop)

    p = sub.add_parser("sweep", help="Sweep the conditioning of a conditional checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--axis", choices=("area", "aspect"), default="area")
    p.add_argument("--values", nargs="+", type=float)
    p.add_argument("--subject-bbox")
    p.add_argument("--out", default="runs/sweep")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("pipeline", help="End-to-end demo on synthetic scenes with mock backends.")
    p.add_argument("--n-sources", type=int, default=500)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--amplify", type=int)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--failure-rate", type=float, default=0.0)
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--skip-train", action="store_true")
    p.add_argument("--out", default="runs/pipeline")
    p.set_defaults(handler=cmd_pipeline)
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config overrides from whichever flags the command defines."""

    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides: Dict[str, Any] = {"seed": args.seed, "workdir": args.workdir}
    overrides.update(
        {
            "backend.kind": get("backend"),
            "datagen.amplify": get("amplify") if args.command == "generate" else None,
            "datagen.class_label": get("class_label"),
            "datagen.workers": get("workers"),
            "datagen.failure_rate": get("failure_rate") if args.command == "generate" else None,
            "filter.classifier_path": get("classifier_path"),
            "filter.threshold": get("threshold"),
            "model.variant": get("variant"),
            "model.backbone": get("backbone"),
            "model.conditioning": get("conditioning"),
            "train.max_sources": get("max_sources"),
            "train.epochs": get("epochs") if args.command == "train" else None,
            "train.ablate": get("ablate"),
            "eval.baseline": get("baseline"),
            "eval.center_area": get("center_area"),
        }
    )
    if get("no_heuristic"):
        overrides["filter.heuristic"] = False
    if get("no_classifier") and args.command == "filter":
        overrides["filter.classifier"] = False
    if get("desk"):
        overrides.update({f"train.{key}": value for key, value in DEMO_TRAIN.items()})
    if args.command == "train":
        overrides["train.quiet"] = args.quiet
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
    try:
        cfg = load_run_config(args.config, collect_overrides(args), args.env_file)
        return handler(args, cfg)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, USER_ERRORS) else 2
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
