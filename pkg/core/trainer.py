"""Training loops for the cropper and its variants.

Every epoch walks the training source ids once, draws one amplification repeat
per id and a fresh enclosing view per record, augments it and steps AdamW under
a warm-up + cosine schedule. Validation runs at every epoch end and the best
checkpoint (lowest validation total) is kept.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image, ImageEnhance, ImageFilter
from scipy import ndimage
from torch import nn
from torch.optim.lr_scheduler import LambdaLR

from config.assumptions import AUX_TRAIN, CROPPER_TRAIN, DEMO_TRAIN, RANKING_NEGATIVE_AREA_RANGE, WEIGHT_DECAY
from core.cropmodel import (
    Conditioning,
    ModelConfig,
    build_model,
    preprocess,
    render_candidate,
    save_checkpoint,
    subject_from_bbox,
    to_square,
)
from core.datagen import DatasetRecord, load_records
from core.geometry import CropRect, ImageDims, SubjectRegion, iou
from core.losses import LossWeights, binary_ce, cropper_loss
from core.pairsampler import ViewParams, sample_enclosing_view
from utils.errors import TrainingDivergedError, UserInputError
from utils.log import get_logger, progress
from utils.render import write_training_curve
from utils.rng import derive_seed, make_rng

log = get_logger(__name__)

ABLATIONS = ("no-subject", "no-boundary-loss", "no-filter")


def warmup_cosine(warmup_steps: int, total_steps: int, floor: float = 0.0) -> Callable[[int], float]:
    """LR multiplier: linear 0 -> 1 over ``warmup_steps``, then cosine down to ``floor``."""

    def factor(step: int) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return step / warmup_steps
        if total_steps <= warmup_steps:
            return 1.0
        done = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * done))

    return factor


def build_optimizer(
    model: nn.Module, lr: float, weight_decay: float, schedule: Callable[[int], float]
) -> Tuple[torch.optim.AdamW, LambdaLR]:
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    return optimizer, LambdaLR(optimizer, schedule)


@dataclass
class AugmentConfig:
    enabled: bool = True
    color_jitter: float = 0.2
    blur_probability: float = 0.2
    blur_radius: Tuple[float, float] = (0.3, 1.2)
    grayscale_probability: float = 0.05
    elastic_probability: float = 0.3
    # peak displacement, fraction of the longest side
    elastic_alpha: float = 0.01
    elastic_sigma: float = 8.0
    hflip_probability: float = 0.5
    bbox_jitter: float = 0.02


@dataclass
class TrainConfig:
    lr: float = CROPPER_TRAIN["lr"]
    warmup_steps: int = CROPPER_TRAIN["warmup_steps"]
    batch_size: int = CROPPER_TRAIN["batch_size"]
    epochs: int = CROPPER_TRAIN["epochs"]
    weight_decay: float = WEIGHT_DECAY
    grad_clip: float = 1.0
    seed: int = 0
    max_sources: Optional[int] = None
    val_fraction: float = 0.1
    workers: int = 4
    ablate: Tuple[str, ...] = ()
    anchor_weight: float = LossWeights().anchor
    boundary_weight: float = LossWeights().boundary
    boundary_margin: float = LossWeights().margin
    negative_area_range: Tuple[float, float] = RANKING_NEGATIVE_AREA_RANGE
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    quiet: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.ablate = tuple(self.ablate)
        if self.lr <= 0:
            raise ValueError("Learning rate must be positive.")
        if self.batch_size <= 0 or self.epochs <= 0 or self.warmup_steps < 0:
            raise ValueError("Batch size and epochs must be positive, warm-up non-negative.")
        if self.max_sources is not None and self.max_sources <= 0:
            raise ValueError("max_sources must be positive.")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1).")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise UserInputError(f"Unknown ablation(s) {sorted(unknown)}; expected any of {ABLATIONS}.")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**{**DEMO_TRAIN, **overrides})

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "TrainConfig":
        base = AUX_TRAIN if variant in ("unet", "ranking") else CROPPER_TRAIN
        return cls(**{**base, **overrides})

    @property
    def loss_weights(self) -> LossWeights:
        boundary = 0.0 if "no-boundary-loss" in self.ablate else self.boundary_weight
        return LossWeights(anchor=self.anchor_weight, boundary=boundary, margin=self.boundary_margin)

    def apply_to_model(self, model_cfg: ModelConfig) -> ModelConfig:
        if "no-subject" in self.ablate:
            return replace(model_cfg, subject_aware=False)
        return model_cfg


# -- augmentation ------------------------------------------------------------


def color_augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    pil = Image.fromarray(image)
    if cfg.color_jitter > 0:
        for enhancer in (ImageEnhance.Brightness, ImageEnhance.Contrast, ImageEnhance.Color):
            pil = enhancer(pil).enhance(float(rng.uniform(1 - cfg.color_jitter, 1 + cfg.color_jitter)))
    if rng.random() < cfg.blur_probability:
        pil = pil.filter(ImageFilter.GaussianBlur(float(rng.uniform(*cfg.blur_radius))))
    if rng.random() < cfg.grayscale_probability:
        pil = pil.convert("L").convert("RGB")
    return np.asarray(pil, dtype=np.uint8).copy()


def elastic_distort(
    image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, alpha: float, sigma: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Smooth random displacement applied identically to pixels and mask."""

    h, w = mask.shape
    fields = []
    for _axis in range(2):
        noise = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=(h, w)), sigma)
        fields.append(noise / (np.abs(noise).max() + 1e-8) * alpha * max(h, w))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = [ys + fields[0], xs + fields[1]]
    warped = np.stack(
        [ndimage.map_coordinates(image[..., c].astype(np.float32), coords, order=1, mode="reflect") for c in range(3)],
        axis=-1,
    )
    warped_mask = ndimage.map_coordinates(mask.astype(np.float32), coords, order=0, mode="reflect") > 0.5
    if not warped_mask.any():
        warped_mask = mask
    return np.clip(warped, 0, 255).astype(np.uint8), warped_mask


def jitter_box(box: CropRect, rng: np.random.Generator, amount: float) -> CropRect:
    if amount <= 0:
        return box
    dx = rng.uniform(-amount, amount, size=2) * box.width
    dy = rng.uniform(-amount, amount, size=2) * box.height
    return CropRect.clamped(box.x1 + dx[0], box.y1 + dy[0], box.x2 + dx[1], box.y2 + dy[1])


# -- samples -----------------------------------------------------------------


@dataclass(eq=False)
class Sample:
    id: str
    tensor: torch.Tensor
    valid: Tuple[float, float]
    label: CropRect
    subject_box: CropRect
    mask_box: Optional[CropRect]
    conditioning: List[float]


@dataclass(eq=False)
class Batch:
    ids: List[str]
    inputs: torch.Tensor
    valid: torch.Tensor
    labels: torch.Tensor
    subject_boxes: torch.Tensor
    mask_boxes: Optional[torch.Tensor]
    conditioning: torch.Tensor

    @classmethod
    def collate(cls, samples: Sequence[Sample]) -> "Batch":
        def rects(items: Sequence[CropRect]) -> torch.Tensor:
            return torch.tensor([r.as_tuple() for r in items], dtype=torch.float32)

        mask_boxes = None
        if all(s.mask_box is not None for s in samples):
            mask_boxes = rects([s.mask_box for s in samples])
        return cls(
            ids=[s.id for s in samples],
            inputs=torch.stack([s.tensor for s in samples]),
            valid=torch.tensor([s.valid for s in samples], dtype=torch.float32),
            labels=rects([s.label for s in samples]),
            subject_boxes=rects([s.subject_box for s in samples]),
            mask_boxes=mask_boxes,
            conditioning=torch.tensor([s.conditioning for s in samples], dtype=torch.float32),
        )


def augment_pair(
    image: np.ndarray,
    subject: SubjectRegion,
    label: CropRect,
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> Tuple[np.ndarray, SubjectRegion, CropRect]:
    """Flip and distort image + mask together; color ops touch pixels only."""

    if not cfg.enabled:
        return image, subject, label
    mask = subject.mask
    if rng.random() < cfg.hflip_probability:
        image, mask, label = image[:, ::-1].copy(), mask[:, ::-1].copy(), label.hflip()
    image = color_augment(image, rng, cfg)
    if rng.random() < cfg.elastic_probability:
        image, mask = elastic_distort(image, mask, rng, cfg.elastic_alpha, cfg.elastic_sigma)
    return image, SubjectRegion.from_mask(mask), label


def make_sample(
    record: DatasetRecord,
    rng: np.random.Generator,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    root: Optional[str | Path],
    train: bool = True,
) -> Sample:
    pair = sample_enclosing_view(record, rng, root, params=ViewParams())
    subject = pair.view_subject
    if subject is None:
        subject = subject_from_bbox(pair.subject_bbox, ImageDims.of(pair.view_image))
    image, label = pair.view_image, pair.label
    if train:
        image, subject, label = augment_pair(image, subject, label, rng, train_cfg.augment)

    prepared = preprocess(image, subject, model_cfg)
    subject_sq = to_square(subject.bbox, prepared.valid)
    mask_box = None
    if prepared.subject_box is not None:
        mask_box = jitter_box(prepared.subject_box, rng, train_cfg.augment.bbox_jitter) if train else prepared.subject_box
    conditioning = Conditioning.from_rect(label, ImageDims.of(image)).to_vector(model_cfg.conditioning)
    return Sample(
        id=record.id,
        tensor=prepared.tensor,
        valid=prepared.valid,
        label=to_square(label, prepared.valid),
        subject_box=subject_sq,
        mask_box=mask_box,
        conditioning=conditioning,
    )


def unet_target(labels: torch.Tensor, size: int) -> torch.Tensor:
    """Binary crop masks ``(B, size, size)`` from square-frame label rects."""

    centers = (torch.arange(size, dtype=torch.float32) + 0.5) / size
    inside_x = (centers[None] >= labels[:, 0:1]) & (centers[None] <= labels[:, 2:3])
    inside_y = (centers[None] >= labels[:, 1:2]) & (centers[None] <= labels[:, 3:4])
    return (inside_y[:, :, None] & inside_x[:, None, :]).float()


# -- data split --------------------------------------------------------------


@dataclass
class DataSplit:
    train: Dict[str, List[DatasetRecord]]
    val: Dict[str, List[DatasetRecord]]


def split_sources(records: Sequence[DatasetRecord], cfg: TrainConfig) -> DataSplit:
    """Group records by source and hold out a stable fraction of sources."""

    kept = list(records) if "no-filter" in cfg.ablate else [r for r in records if r.kept]
    if not kept:
        raise UserInputError("The manifest has no usable records; generate and filter data first.")
    by_source: Dict[str, List[DatasetRecord]] = {}
    for record in sorted(kept, key=lambda r: (r.source_id, r.repeat_index)):
        by_source.setdefault(record.source_id, []).append(record)

    ids = sorted(by_source)
    if cfg.max_sources is not None:
        order = make_rng(cfg.seed, "max-sources").permutation(len(ids))
        ids = sorted(ids[i] for i in order[: cfg.max_sources])

    val_ids = [i for i in ids if derive_seed(cfg.seed, "val", i) % 1000 < cfg.val_fraction * 1000]
    train_ids = [i for i in ids if i not in set(val_ids)]
    if not train_ids:
        train_ids, val_ids = ids, []
    if not val_ids:
        val_ids = train_ids[: max(1, len(train_ids) // 10)]
    return DataSplit({i: by_source[i] for i in train_ids}, {i: by_source[i] for i in val_ids})


def epoch_records(split: Dict[str, List[DatasetRecord]], seed: int, epoch: int) -> List[DatasetRecord]:
    """One record per source id, repeat chosen per (epoch, id), order shuffled per epoch."""

    ids = sorted(split)
    order = make_rng(seed, "order", epoch).permutation(len(ids))
    chosen = []
    for index in order:
        source_id = ids[index]
        repeats = split[source_id]
        chosen.append(repeats[int(make_rng(seed, "repeat", epoch, source_id).integers(0, len(repeats)))])
    return chosen


def validation_records(split: Dict[str, List[DatasetRecord]]) -> List[DatasetRecord]:
    return [split[i][0] for i in sorted(split)]


# -- loss dispatch -----------------------------------------------------------


def batch_loss(
    model: nn.Module, model_cfg: ModelConfig, batch: Batch, weights: LossWeights
) -> Tuple[torch.Tensor, Dict[str, float]]:
    if model_cfg.variant == "unet":
        scores = torch.sigmoid(model(batch.inputs))
        loss = binary_ce(scores, unet_target(batch.labels, scores.shape[-1]))
        return loss, {"bce": float(loss.detach()), "total": float(loss.detach())}

    conditioning = batch.conditioning if model_cfg.variant == "conditional" else None
    out = model(batch.inputs, batch.mask_boxes, batch.valid, conditioning)
    total, breakdown = cropper_loss(out.grid.proposals, out.blended, batch.labels, batch.subject_boxes, weights)
    return total, breakdown.as_dict()


@torch.no_grad()
def validation_loss(model: nn.Module, model_cfg: ModelConfig, batches: Sequence[Batch], weights: LossWeights) -> Dict[str, float]:
    """Mean loss components over fixed validation batches, weighted by batch size."""

    model.eval()
    sums: Dict[str, float] = {}
    count = 0
    for batch in batches:
        _loss, parts = batch_loss(model, model_cfg, batch, weights)
        n = len(batch.ids)
        for key, value in parts.items():
            sums[key] = sums.get(key, 0.0) + value * n
        count += n
    return {key: value / max(count, 1) for key, value in sums.items()}


def _dump_divergence(out_dir: Path, step: int, ids: Sequence[str], parts: Dict[str, float], lr: float) -> Path:
    path = out_dir / f"diverged-step{step}.json"
    path.write_text(json.dumps({"step": step, "lr": lr, "batch_ids": list(ids), "losses": parts}, indent=2), encoding="utf-8")
    return path


@dataclass
class TrainResult:
    checkpoint: Path
    last_checkpoint: Path
    history: pd.DataFrame
    metrics_path: Path
    best_val: float
    lr_trace: List[float] = field(default_factory=list)
    # validation losses of the untrained model
    initial_val: Dict[str, float] = field(default_factory=dict)


def _build_batches(
    records: Sequence[DatasetRecord],
    make: Callable[[DatasetRecord], object],
    batch_size: int,
    pool: ThreadPoolExecutor,
) -> List[List[object]]:
    items = list(pool.map(make, records))
    return [items[i : i + batch_size] for i in range(0, len(items), batch_size)]


def train(
    manifest_path: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Train a base, conditional or U-Net model; ranking goes through :func:`train_ranking`."""

    if model_cfg.variant == "ranking":
        return train_ranking(manifest_path, model_cfg, train_cfg, out_dir)

    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = manifest_path.parent
    model_cfg = train_cfg.apply_to_model(model_cfg)
    weights = train_cfg.loss_weights
    split = split_sources(load_records(manifest_path), train_cfg)

    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    steps_per_epoch = math.ceil(len(split.train) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    if total_steps <= train_cfg.warmup_steps:
        log.warning("run has %d steps, not more than the %d warm-up steps", total_steps, train_cfg.warmup_steps)
    optimizer, scheduler = build_optimizer(
        model, train_cfg.lr, train_cfg.weight_decay, warmup_cosine(train_cfg.warmup_steps, total_steps)
    )
    log.info(
        "training %s: %d train / %d val sources, %d steps", model_cfg.variant, len(split.train), len(split.val), total_steps
    )

    pool = ThreadPoolExecutor(max_workers=max(1, train_cfg.workers))
    val_batches = [
        Batch.collate(chunk)
        for chunk in _build_batches(
            validation_records(split.val),
            lambda r: make_sample(r, make_rng(train_cfg.seed, "val", r.id), model_cfg, train_cfg, root, train=False),
            train_cfg.batch_size,
            pool,
        )
    ]
    initial_val = validation_loss(model, model_cfg, val_batches, weights)

    history: List[Dict[str, float]] = []
    lr_trace: List[float] = []
    best_val = math.inf
    best_path = out_dir / "best.pt"
    metrics_path = out_dir / "metrics.csv"
    meta = {"train_config": asdict(train_cfg), "manifest": str(manifest_path)}
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            model.train()
            records = epoch_records(split.train, train_cfg.seed, epoch)
            batches = _build_batches(
                records,
                lambda r, e=epoch: make_sample(r, make_rng(train_cfg.seed, e, r.source_id), model_cfg, train_cfg, root),
                train_cfg.batch_size,
                pool,
            )
            sums: Dict[str, float] = {}
            seen = 0
            for chunk in progress(batches, f"epoch {epoch + 1}/{train_cfg.epochs}", train_cfg.quiet):
                batch = Batch.collate(chunk)
                loss, parts = batch_loss(model, model_cfg, batch, weights)
                lr = scheduler.get_last_lr()[0]
                if not torch.isfinite(loss):
                    dump = _dump_divergence(out_dir, step, batch.ids, parts, lr)
                    raise TrainingDivergedError(step, batch.ids, str(dump))
                optimizer.zero_grad()
                loss.backward()
                if train_cfg.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                optimizer.step()
                scheduler.step()
                lr_trace.append(lr)
                step += 1
                for key, value in parts.items():
                    sums[key] = sums.get(key, 0.0) + value * len(batch.ids)
                seen += len(batch.ids)

            val = validation_loss(model, model_cfg, val_batches, weights)
            row = {"epoch": epoch + 1, "steps": step, "lr": lr_trace[-1] if lr_trace else train_cfg.lr}
            row.update({f"train_{k}": v / max(seen, 1) for k, v in sums.items()})
            row.update({f"val_{k}": v for k, v in val.items()})
            history.append(row)
            pd.DataFrame(history).to_csv(metrics_path, index=False)
            log.info("epoch %d: train %.4f, val %.4f", epoch + 1, row["train_total"], row["val_total"])

            if val["total"] < best_val:
                best_val = val["total"]
                save_checkpoint(best_path, model, model_cfg, {**meta, "epoch": epoch + 1, "val_total": best_val})
    finally:
        pool.shutdown(wait=True)

    last_path = save_checkpoint(out_dir / "last.pt", model, model_cfg, {**meta, "epoch": train_cfg.epochs})
    frame = pd.DataFrame(history)
    write_training_curve(frame, out_dir / "curves.html")
    return TrainResult(best_path, last_path, frame, metrics_path, best_val, lr_trace, initial_val)


# -- ranking variant ---------------------------------------------------------


def sample_negative_crop(
    rng: np.random.Generator,
    positive: CropRect,
    area_range: Tuple[float, float] = RANKING_NEGATIVE_AREA_RANGE,
    max_attempts: int = 100,
) -> CropRect:
    """Uniformly placed crop whose area fraction lies in ``area_range``; never the positive itself."""

    for _attempt in range(max_attempts):
        area = float(rng.uniform(*area_range))
        ratio = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
        w, h = math.sqrt(area * ratio), math.sqrt(area / ratio)
        if w > 1.0 or h > 1.0:
            continue
        x, y = float(rng.uniform(0.0, 1.0 - w)), float(rng.uniform(0.0, 1.0 - h))
        rect = CropRect.clamped(x, y, x + w, y + h)
        if iou(rect, positive) < 0.999:
            return rect
    raise RuntimeError("could not draw a negative crop distinct from the positive")


@dataclass(eq=False)
class RankingSample:
    id: str
    positive: torch.Tensor
    negative: torch.Tensor


def make_ranking_sample(
    record: DatasetRecord,
    rng: np.random.Generator,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    root: Optional[str | Path],
    train: bool = True,
) -> RankingSample:
    pair = sample_enclosing_view(record, rng, root)
    subject = pair.view_subject
    if subject is None:
        subject = subject_from_bbox(pair.subject_bbox, ImageDims.of(pair.view_image))
    image, label = pair.view_image, pair.label
    if train:
        image, subject, label = augment_pair(image, subject, label, rng, train_cfg.augment)
    negative = sample_negative_crop(rng, label, train_cfg.negative_area_range)
    return RankingSample(
        id=record.id,
        positive=render_candidate(image, subject, label, model_cfg),
        negative=render_candidate(image, subject, negative, model_cfg),
    )


def ranking_batch(samples: Sequence[RankingSample]) -> Tuple[torch.Tensor, torch.Tensor, List[str]]:
    """Interleave positives and negatives; targets are exactly half ones."""

    inputs = torch.stack([t for s in samples for t in (s.positive, s.negative)])
    targets = torch.tensor([v for _s in samples for v in (1.0, 0.0)], dtype=torch.float32)
    return inputs, targets, [s.id for s in samples]


@torch.no_grad()
def ranking_validation(model: nn.Module, samples: Sequence[RankingSample], batch_size: int) -> Dict[str, float]:
    """BCE and the fraction of pairs where the real crop outscores the random one."""

    model.eval()
    losses, wins, n = 0.0, 0, 0
    for start in range(0, len(samples), batch_size):
        inputs, targets, _ids = ranking_batch(samples[start : start + batch_size])
        scores = model(inputs)
        losses += float(binary_ce(scores, targets)) * len(targets)
        wins += int((scores[0::2] > scores[1::2]).sum())
        n += len(targets)
    pairs = max(n // 2, 1)
    return {"total": losses / max(n, 1), "pair_accuracy": wins / pairs}


def train_ranking(
    manifest_path: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Real-vs-random crop classifier; each batch holds one positive and one negative per record."""

    if model_cfg.variant != "ranking":
        model_cfg = replace(model_cfg, variant="ranking")
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = manifest_path.parent
    model_cfg = train_cfg.apply_to_model(model_cfg)
    split = split_sources(load_records(manifest_path), train_cfg)

    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    per_batch = max(1, train_cfg.batch_size // 2)
    steps_per_epoch = math.ceil(len(split.train) / per_batch)
    total_steps = steps_per_epoch * train_cfg.epochs
    optimizer, scheduler = build_optimizer(
        model, train_cfg.lr, train_cfg.weight_decay, warmup_cosine(train_cfg.warmup_steps, total_steps)
    )

    pool = ThreadPoolExecutor(max_workers=max(1, train_cfg.workers))
    val_samples = list(
        pool.map(
            lambda r: make_ranking_sample(r, make_rng(train_cfg.seed, "val", r.id), model_cfg, train_cfg, root, train=False),
            validation_records(split.val),
        )
    )

    history: List[Dict[str, float]] = []
    lr_trace: List[float] = []
    best_val = math.inf
    best_path = out_dir / "best.pt"
    metrics_path = out_dir / "metrics.csv"
    meta = {"train_config": asdict(train_cfg), "manifest": str(manifest_path)}
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            records = epoch_records(split.train, train_cfg.seed, epoch)
            samples = list(
                pool.map(
                    lambda r, e=epoch: make_ranking_sample(r, make_rng(train_cfg.seed, e, r.source_id), model_cfg, train_cfg, root),
                    records,
                )
            )
            total, seen = 0.0, 0
            model.train()
            for start in progress(range(0, len(samples), per_batch), f"ranking {epoch + 1}", train_cfg.quiet):
                inputs, targets, ids = ranking_batch(samples[start : start + per_batch])
                loss = binary_ce(model(inputs), targets)
                lr = scheduler.get_last_lr()[0]
                if not torch.isfinite(loss):
                    dump = _dump_divergence(out_dir, step, ids, {"bce": float(loss.detach())}, lr)
                    raise TrainingDivergedError(step, ids, str(dump))
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                lr_trace.append(lr)
                step += 1
                total += float(loss.detach()) * len(targets)
                seen += len(targets)

            val = ranking_validation(model, val_samples, per_batch)
            history.append(
                {
                    "epoch": epoch + 1,
                    "steps": step,
                    "lr": lr_trace[-1] if lr_trace else train_cfg.lr,
                    "train_total": total / max(seen, 1),
                    "val_total": val["total"],
                    "val_pair_accuracy": val["pair_accuracy"],
                }
            )
            pd.DataFrame(history).to_csv(metrics_path, index=False)
            if val["total"] < best_val:
                best_val = val["total"]
                save_checkpoint(best_path, model, model_cfg, {**meta, "epoch": epoch + 1, "val_total": best_val})
    finally:
        pool.shutdown(wait=True)

    last_path = save_checkpoint(out_dir / "last.pt", model, model_cfg, {**meta, "epoch": train_cfg.epochs})
    frame = pd.DataFrame(history)
    write_training_curve(frame, out_dir / "curves.html")
    return TrainResult(best_path, last_path, frame, metrics_path, best_val, lr_trace)
