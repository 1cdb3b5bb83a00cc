"""End-to-end demo: scenes -> mock outpainting -> filtering -> training -> evaluation."""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

from config.assumptions import DEMO_EPOCHS, DEMO_EVAL_IMAGES, DEMO_SOURCES, DEMO_TRAIN
from config.settings import RunConfig
from core.backends import build_backends
from core.datagen import discover_sources, run_generation
from core.evalkit import CenterCropBaseline, EvalReport, evaluate, load_eval_manifest, predictor_crop_fn
from core.cropmodel import CropPredictor
from core.qualityfilter import QualityTrainConfig, filter_manifest, make_quality_examples, train_quality_classifier
from core.scenegen import write_scene_corpus
from core.trainer import train
from utils.errors import PipelineStageError, UserInputError
from utils.log import get_logger

log = get_logger(__name__)


@dataclass
class PipelineOptions:
    n_sources: int = DEMO_SOURCES
    n_eval: int = DEMO_EVAL_IMAGES
    amplify: Optional[int] = None
    epochs: int = DEMO_EPOCHS
    skip_train: bool = False
    failure_rate: float = 0.0
    quality_examples: int = 160
    quality_epochs: int = 30
    use_classifier: bool = True
    # desk-scale learning rate, warm-up and batch size instead of the full schedule
    desk_schedule: bool = True
    quiet: bool = True


@dataclass
class PipelineResult:
    out_dir: Path
    checkpoint: Path
    report: EvalReport
    baseline: EvalReport
    summary_path: Path

    @property
    def margin_over_baseline(self) -> float:
        return self.report.mean_iou - self.baseline.mean_iou


@contextmanager
def stage(name: str) -> Iterator[None]:
    log.info("stage %s", name)
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def run_pipeline(cfg: RunConfig, out_dir: str | Path, opts: Optional[PipelineOptions] = None) -> PipelineResult:
    """Build every artifact of the demo under ``out_dir`` and return both reports."""

    opts = opts or PipelineOptions()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datagen_cfg = replace(cfg.datagen, failure_rate=opts.failure_rate, amplify=opts.amplify or cfg.datagen.amplify)
    train_cfg = replace(cfg.train, epochs=opts.epochs, quiet=opts.quiet)
    if opts.desk_schedule:
        train_cfg = replace(train_cfg, **DEMO_TRAIN)
    cfg = replace(cfg, datagen=datagen_cfg, train=train_cfg)
    cfg.write_resolved(out_dir)

    scenes_dir = out_dir / "scenes"
    manifest = out_dir / "data" / "manifest.jsonl"
    model_dir = out_dir / "model"
    checkpoint = model_dir / "best.pt"
    summary: Dict[str, Any] = {"options": asdict(opts)}

    if opts.skip_train and not checkpoint.is_file():
        raise UserInputError(f"--skip-train needs an existing checkpoint at {checkpoint}.")

    with stage("scenes"):
        corpus = write_scene_corpus(scenes_dir, opts.n_sources, opts.n_eval, seed=cfg.seed)

    if not opts.skip_train:
        with stage("generate"):
            backends = build_backends("mock", failure_rate=datagen_cfg.failure_rate)
            gen_stats = run_generation(discover_sources(corpus["sources"]), backends, datagen_cfg, manifest, quiet=opts.quiet)
            summary["generation"] = asdict(gen_stats)

        with stage("filter"):
            classifier = None
            if opts.use_classifier and cfg.filter.classifier:
                examples = make_quality_examples(opts.quality_examples, seed=cfg.seed)
                classifier = train_quality_classifier(
                    examples, QualityTrainConfig(epochs=opts.quality_epochs, lr=1e-3, seed=cfg.seed), quiet=opts.quiet
                )
                classifier.save(model_dir / "quality.pt")
            _records, filter_stats = filter_manifest(manifest, backends.detector, cfg.filter, classifier, quiet=opts.quiet)
            summary["filter"] = filter_stats.as_dict()

        with stage("train"):
            result = train(manifest, cfg.model, train_cfg, model_dir)
            checkpoint = result.checkpoint
            summary["best_val"] = result.best_val
    else:
        log.info("reusing checkpoint %s", checkpoint)

    with stage("evaluate"):
        entries = load_eval_manifest(corpus["eval_manifest"])
        report = evaluate(predictor_crop_fn(CropPredictor.from_checkpoint(checkpoint)), entries, cfg.eval)
        baseline = evaluate(CenterCropBaseline.mean_label_area(entries), entries, cfg.eval)
        report.write(out_dir / "eval")
        baseline.write(out_dir / "eval" / "baseline")

    summary["model"] = report.aggregates()
    summary["baseline"] = baseline.aggregates()
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str), encoding="utf-8")
    log.info("pipeline done: IoU %.4f vs baseline %.4f", report.mean_iou, baseline.mean_iou)
    return PipelineResult(out_dir, checkpoint, report, baseline, summary_path)
