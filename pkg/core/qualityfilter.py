"""Rejection filters for outpainted records.

Two independent mechanisms flag a record: the extra-subject heuristic (another
subject-class detection in the synthesized area larger than a quarter of the
subject) and a small CNN trained to spot tiled or bordered canvases.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch import nn

from config.assumptions import (
    DEFAULT_SUBJECT_CLASS,
    EXTRA_SUBJECT_AREA_RATIO,
    QUALITY_INPUT_SIZE,
    QUALITY_THRESHOLD,
    QUALITY_TRAIN,
    WEIGHT_DECAY,
)
from core.backends import Detection, MockOutpainter, OutpaintRequest, SubjectDetector, draw_border, tile_canvas
from core.datagen import (
    FLAG_EXTRA_SUBJECT,
    FLAG_KEPT,
    FLAG_QUALITY_REJECT,
    DatasetRecord,
    compose_canvas,
    load_records,
    sample_canvas_placement,
)
from core.geometry import ImageDims, iou
from core.losses import binary_ce
from core.scenegen import generate_scene, scene_spec_for
from core.trainer import build_optimizer, warmup_cosine
from utils.data_loader import write_jsonl
from utils.errors import UserInputError
from utils.log import get_logger, progress

log = get_logger(__name__)


@dataclass
class QualityVerdict:
    extra_subject: bool
    classifier_score: float
    rejected: bool
    reasons: List[str] = field(default_factory=list)

    @classmethod
    def decide(cls, extra_subject: bool, classifier_score: float, threshold: float) -> "QualityVerdict":
        reasons = []
        if extra_subject:
            reasons.append(FLAG_EXTRA_SUBJECT)
        if classifier_score >= threshold:
            reasons.append(FLAG_QUALITY_REJECT)
        return cls(extra_subject, float(classifier_score), bool(reasons), reasons)

    @property
    def flags(self) -> set:
        return set(self.reasons) if self.rejected else {FLAG_KEPT}


def extra_subject_heuristic(
    record: DatasetRecord,
    detections_post: Sequence[Detection],
    class_label: str = DEFAULT_SUBJECT_CLASS,
    area_ratio: float = EXTRA_SUBJECT_AREA_RATIO,
) -> bool:
    """True when a second subject larger than ``area_ratio`` of the subject sits in the synthesized area.

    The dominant subject is the detection overlapping the recorded subject box
    best; a detection counts as synthesized when its bbox center lies outside
    the pseudo-label.
    """

    same_class = [d for d in detections_post if d.class_label == class_label]
    if len(same_class) < 2:
        return False
    dominant = max(same_class, key=lambda d: iou(d.bbox, record.subject_bbox))
    subject_area = dominant.area if iou(dominant.bbox, record.subject_bbox) > 0 else record.subject_bbox.area
    for det in same_class:
        if det is dominant:
            continue
        cx, cy = det.bbox.center
        if record.pseudo_label.contains_point(cx, cy):
            continue
        if det.area > subject_area * area_ratio:
            return True
    return False


# -- learned classifier ------------------------------------------------------


class QualityNet(nn.Module):
    """Four strided conv blocks, then a dense head over the flattened spatial map."""

    def __init__(self, input_size: int = QUALITY_INPUT_SIZE) -> None:
        super().__init__()
        widths = (16, 32, 64, 64)
        layers = []
        prev = 3
        for width in widths:
            layers += [nn.Conv2d(prev, width, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
            prev = width
        self.features = nn.Sequential(*layers)
        side = input_size // 16
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(prev * side * side, 64), nn.ReLU(inplace=True), nn.Linear(64, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.features(x))).squeeze(-1)


def to_quality_input(images: Sequence[np.ndarray], size: int = QUALITY_INPUT_SIZE) -> torch.Tensor:
    batch = np.stack(
        [np.asarray(Image.fromarray(np.asarray(img, dtype=np.uint8)).resize((size, size), resample=Image.BILINEAR)) for img in images]
    )
    tensor = torch.from_numpy(batch.astype(np.float32) / 127.5 - 1.0)
    return tensor.permute(0, 3, 1, 2).contiguous()


@dataclass
class QualityTrainConfig:
    epochs: int = QUALITY_TRAIN["epochs"]
    lr: float = QUALITY_TRAIN["lr"]
    batch_size: int = QUALITY_TRAIN["batch_size"]
    weight_decay: float = WEIGHT_DECAY
    input_size: int = QUALITY_INPUT_SIZE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("Quality classifier epochs, batch size and learning rate must be positive.")
        if self.input_size % 16:
            raise ValueError("Quality classifier input size must be a multiple of 16.")


class QualityClassifier:
    """Scores how likely an outpainted canvas is a tiled/bordered failure."""

    def __init__(self, net: QualityNet, input_size: int = QUALITY_INPUT_SIZE, threshold: float = QUALITY_THRESHOLD) -> None:
        self.net = net.eval()
        self.input_size = input_size
        self.threshold = threshold
        self.history: List[float] = []

    @torch.no_grad()
    def score(self, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
        self.net.eval()
        scores = []
        for start in range(0, len(images), batch_size):
            batch = to_quality_input(images[start : start + batch_size], self.input_size)
            scores.append(self.net(batch).cpu().numpy())
        return np.concatenate(scores) if scores else np.zeros(0, dtype=np.float32)

    def predict(self, image: np.ndarray) -> float:
        return float(self.score([image])[0])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"input_size": self.input_size, "threshold": self.threshold, "state_dict": self.net.state_dict()}, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "QualityClassifier":
        path = Path(path)
        if not path.is_file():
            raise UserInputError(f"Quality classifier not found: {path}")
        payload = torch.load(path, map_location="cpu")
        net = QualityNet(payload["input_size"])
        net.load_state_dict(payload["state_dict"])
        return cls(net, payload["input_size"], payload.get("threshold", QUALITY_THRESHOLD))


def train_quality_classifier(
    labeled: Sequence[Tuple[np.ndarray, bool]],
    cfg: Optional[QualityTrainConfig] = None,
    quiet: bool = True,
) -> QualityClassifier:
    """Fit the bad-canvas classifier with AdamW and cosine annealing."""

    cfg = cfg or QualityTrainConfig()
    targets = np.array([bool(bad) for _img, bad in labeled], dtype=np.float32)
    if len(np.unique(targets)) < 2:
        raise UserInputError("The quality classifier needs both clean and bad examples.")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    inputs = to_quality_input([img for img, _bad in labeled], cfg.input_size)
    target_tensor = torch.from_numpy(targets)

    net = QualityNet(cfg.input_size)
    steps_per_epoch = -(-len(labeled) // cfg.batch_size)
    optimizer, scheduler = build_optimizer(net, cfg.lr, cfg.weight_decay, warmup_cosine(0, cfg.epochs * steps_per_epoch))

    history = []
    for _epoch in progress(range(cfg.epochs), "quality classifier", quiet):
        net.train()
        order = rng.permutation(len(labeled))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            loss = binary_ce(net(inputs[idx]), target_tensor[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(order))
        log.debug("quality epoch %d loss %.4f", len(history), history[-1])

    classifier = QualityClassifier(net, cfg.input_size)
    classifier.history = history
    return classifier


def make_quality_examples(n: int, seed: int = 0, canvas_size: int = 256) -> List[Tuple[np.ndarray, bool]]:
    """Synthetic labeled canvases: half clean mock outpaintings, the rest tiled or bordered."""

    outpainter = MockOutpainter()
    examples = []
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        source = generate_scene(scene_spec_for(index, seed)).source_image()
        placement = sample_canvas_placement(ImageDims.of(source), rng, canvas_size)
        canvas, valid = compose_canvas(source, placement, canvas_size)
        clean = outpainter.outpaint(OutpaintRequest(image=canvas, valid_mask=valid, prompt="", seed=index))
        kind = index % 4
        if kind < 2:
            examples.append((clean, False))
            continue
        bad = tile_canvas(canvas, valid) if kind == 2 else draw_border(clean, valid, rng)
        bad[valid] = canvas[valid]
        examples.append((bad, True))
    return examples


# -- manifest filtering ------------------------------------------------------


@dataclass
class FilterConfig:
    heuristic: bool = True
    classifier: bool = True
    classifier_path: Optional[str] = None
    threshold: float = QUALITY_THRESHOLD
    area_ratio: float = EXTRA_SUBJECT_AREA_RATIO
    class_label: str = DEFAULT_SUBJECT_CLASS
    workers: int = 4
    batch_size: int = 32


@dataclass
class FilterStats:
    total: int = 0
    kept: int = 0
    by_reason: Dict[str, int] = field(default_factory=dict)

    @property
    def rejected(self) -> int:
        return self.total - self.kept

    def to_frame(self) -> pd.DataFrame:
        rows = [{"reason": FLAG_KEPT, "count": self.kept}]
        rows += [{"reason": reason, "count": count} for reason, count in sorted(self.by_reason.items())]
        return pd.DataFrame(rows)

    def as_dict(self) -> Dict[str, int]:
        return {"total": self.total, "kept": self.kept, "rejected": self.rejected, **self.by_reason}


def judge_records(
    records: Sequence[DatasetRecord],
    detector: Optional[SubjectDetector],
    cfg: FilterConfig,
    classifier: Optional[QualityClassifier] = None,
    root: Optional[str | Path] = None,
    quiet: bool = True,
) -> List[QualityVerdict]:
    """Verdicts for ``records``; a disabled filter never rejects."""

    use_heuristic = cfg.heuristic and detector is not None
    use_classifier = cfg.classifier and classifier is not None

    def heuristic(record: DatasetRecord) -> bool:
        if not use_heuristic:
            return False
        detections = detector.detect_subjects(record.load_image(root), cfg.class_label)
        return extra_subject_heuristic(record, detections, cfg.class_label, cfg.area_ratio)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        extra = list(progress(pool.map(heuristic, records), "filter", quiet, total=len(records)))

    scores = np.zeros(len(records), dtype=np.float64)
    if use_classifier:
        for start in range(0, len(records), cfg.batch_size):
            chunk = records[start : start + cfg.batch_size]
            scores[start : start + len(chunk)] = classifier.score([r.load_image(root) for r in chunk])

    threshold = cfg.threshold if use_classifier else float("inf")
    return [QualityVerdict.decide(e, s, threshold) for e, s in zip(extra, scores)]


def filter_manifest(
    manifest_path: str | Path,
    detector: Optional[SubjectDetector],
    cfg: Optional[FilterConfig] = None,
    classifier: Optional[QualityClassifier] = None,
    out_path: Optional[str | Path] = None,
    quiet: bool = True,
) -> Tuple[List[DatasetRecord], FilterStats]:
    """Flag every record of a manifest and write the flagged manifest.

    Only ``filter_flags`` changes; rerunning on the output gives the same
    verdicts because flags are recomputed from scratch.
    """

    cfg = cfg or FilterConfig()
    manifest_path = Path(manifest_path)
    records = load_records(manifest_path)
    if cfg.classifier and classifier is None and cfg.classifier_path:
        classifier = QualityClassifier.load(cfg.classifier_path)
    if cfg.classifier and classifier is None:
        log.warning("no quality classifier supplied; only the extra-subject heuristic runs")

    verdicts = judge_records(records, detector, cfg, classifier, manifest_path.parent, quiet)
    stats = FilterStats(total=len(records))
    for record, verdict in zip(records, verdicts):
        record.filter_flags = verdict.flags
        if verdict.rejected:
            for reason in verdict.reasons:
                stats.by_reason[reason] = stats.by_reason.get(reason, 0) + 1
        else:
            stats.kept += 1

    out_path = Path(out_path) if out_path else manifest_path
    if out_path.parent.resolve() != manifest_path.parent.resolve():
        raise UserInputError("The filtered manifest must live beside the generated images.")
    write_jsonl(out_path, (r.to_json() for r in records))
    log.info("filter: kept %d of %d records %s", stats.kept, stats.total, stats.by_reason)
    return records, stats
