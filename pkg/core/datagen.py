"""Outpainting dataset generation.

For each source image: detect and pre-filter the subject, caption it, paste
it into a 512x512 canvas at a random placement, outpaint the rest, re-detect
the subject on the canvas and record the pasted rectangle as the pseudo-label.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set

import numpy as np
from PIL import Image

from config.assumptions import (
    CANVAS_SIZE,
    DEFAULT_AMPLIFY,
    DEFAULT_SUBJECT_CLASS,
    MANIFEST_SCHEMA_VERSION,
    MAX_SUBJECT_AREA_FRACTION,
    MAX_SUBJECTS,
    MIN_SUBJECT_HEIGHT_FRACTION,
    PLACEMENT_AREA_RANGE,
)
from core.backends import Backends, Detection, OutpaintRequest, safe_caption
from core.geometry import CropRect, ImageDims, SubjectRegion, iou
from utils.data_loader import (
    ManifestWriter,
    completed_ids,
    list_images,
    load_image,
    load_mask,
    read_jsonl,
    resolve_path,
    save_image,
    save_mask,
)
from utils.errors import BackendResponseError, BackendUnavailableError, RecordDiscarded
from utils.log import get_logger, progress
from utils.rng import derive_seed

log = get_logger(__name__)

FLAG_KEPT = "kept"
FLAG_EXTRA_SUBJECT = "extra_subject"
FLAG_QUALITY_REJECT = "quality_reject"
REJECT_FLAGS = (FLAG_EXTRA_SUBJECT, FLAG_QUALITY_REJECT)


@dataclass
class DatagenConfig:
    canvas_size: int = CANVAS_SIZE
    area_range: tuple = PLACEMENT_AREA_RANGE
    amplify: int = DEFAULT_AMPLIFY
    seed: int = 0
    class_label: str = DEFAULT_SUBJECT_CLASS
    max_subjects: int = MAX_SUBJECTS
    min_height_fraction: float = MIN_SUBJECT_HEIGHT_FRACTION
    max_area_fraction: float = MAX_SUBJECT_AREA_FRACTION
    # per-class hook: drop sources where another class outsizes the subject
    discard_larger_other_class: bool = False
    workers: int = 4
    failure_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.amplify <= 0:
            raise ValueError("Amplification factor must be positive.")
        lo, hi = self.area_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"Area range must satisfy 0 < lo <= hi <= 1, got {self.area_range}.")
        self.area_range = (float(lo), float(hi))


@dataclass(frozen=True)
class Placement:
    """Where the source image landed inside the canvas (pixel units)."""

    area_fraction: float
    scale: float
    offset_x: int
    offset_y: int
    width: int
    height: int
    fallback: bool = False

    def rect(self, canvas_size: int) -> CropRect:
        return CropRect.from_pixels(
            (self.offset_x, self.offset_y, self.offset_x + self.width, self.offset_y + self.height),
            ImageDims(canvas_size, canvas_size),
        )


@dataclass
class PrefilterResult:
    keep: bool
    reason: str
    dominant: Optional[Detection] = None


@dataclass
class SourceImage:
    id: str
    path: Path

    def load(self) -> np.ndarray:
        return load_image(self.path)


@dataclass(eq=False)
class DatasetRecord:
    id: str
    source_id: str
    source_path: str
    outpainted_path: str
    mask_path: str
    caption: str
    subject_bbox: CropRect
    pseudo_label: CropRect
    placement: Dict[str, Any]
    repeat_index: int
    seed: int
    filter_flags: Set[str] = field(default_factory=lambda: {FLAG_KEPT})
    caption_warning: bool = False
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self) -> None:
        label = self.pseudo_label
        if not (0 <= label.x1 and label.x2 <= 1 and 0 <= label.y1 and label.y2 <= 1):
            raise ValueError(f"Record {self.id}: pseudo-label leaves the canvas.")
        if not self.subject_bbox.intersects(label):
            raise ValueError(f"Record {self.id}: subject does not overlap the pseudo-label.")
        if FLAG_KEPT in self.filter_flags and self.filter_flags & set(REJECT_FLAGS):
            raise ValueError(f"Record {self.id}: a kept record cannot carry reject flags.")

    @property
    def kept(self) -> bool:
        return FLAG_KEPT in self.filter_flags

    def load_subject(self, root: Optional[str | Path] = None) -> SubjectRegion:
        mask = load_mask(resolve_path(self.mask_path, root))
        return SubjectRegion.from_mask(mask)

    def load_image(self, root: Optional[str | Path] = None) -> np.ndarray:
        return load_image(resolve_path(self.outpainted_path, root))

    def to_json(self) -> Dict[str, Any]:
        row = asdict(self)
        row["subject_bbox"] = self.subject_bbox.to_list()
        row["pseudo_label"] = self.pseudo_label.to_list()
        row["filter_flags"] = sorted(self.filter_flags)
        return row

    @classmethod
    def from_json(cls, row: Dict[str, Any]) -> "DatasetRecord":
        version = int(row.get("schema_version", MANIFEST_SCHEMA_VERSION))
        if version > MANIFEST_SCHEMA_VERSION:
            raise ValueError(f"Manifest schema {version} is newer than supported {MANIFEST_SCHEMA_VERSION}.")
        data = dict(row)
        data["subject_bbox"] = CropRect.from_list(row["subject_bbox"])
        data["pseudo_label"] = CropRect.from_list(row["pseudo_label"])
        data["filter_flags"] = set(row.get("filter_flags", [FLAG_KEPT]))
        return cls(**data)


def prefilter_source(image: np.ndarray, detections: Sequence[Detection], cfg: DatagenConfig, other_detections: Sequence[Detection] = ()) -> PrefilterResult:
    """Keep a source only if it shows one plausible dominant subject."""

    if image.size == 0 or not detections:
        return PrefilterResult(False, "no_subject")
    if len(detections) > cfg.max_subjects:
        return PrefilterResult(False, "too_many")

    dominant = max(detections, key=lambda d: d.area)
    if dominant.bbox.height < cfg.min_height_fraction:
        return PrefilterResult(False, "too_small", dominant)
    if dominant.area > cfg.max_area_fraction:
        return PrefilterResult(False, "too_large", dominant)
    if cfg.discard_larger_other_class and any(d.area > dominant.area for d in other_detections):
        return PrefilterResult(False, "larger_other_class", dominant)
    return PrefilterResult(True, "ok", dominant)


def sample_canvas_placement(src_dims: ImageDims, rng: np.random.Generator, canvas_size: int = CANVAS_SIZE, area_range: tuple = PLACEMENT_AREA_RANGE) -> Placement:
    """Scale the source to a uniformly drawn share of the canvas and place it at random."""

    area_fraction = float(rng.uniform(*area_range))
    scale = math.sqrt(area_fraction * canvas_size**2 / src_dims.area)
    width = int(round(src_dims.width * scale))
    height = int(round(src_dims.height * scale))
    fallback = False
    if width > canvas_size or height > canvas_size:
        scale = canvas_size / max(src_dims.width, src_dims.height)
        width = min(canvas_size, int(round(src_dims.width * scale)))
        height = min(canvas_size, int(round(src_dims.height * scale)))
        fallback = True
    width, height = max(width, 1), max(height, 1)

    offset_x = int(rng.integers(0, canvas_size - width + 1))
    offset_y = int(rng.integers(0, canvas_size - height + 1))
    return Placement(area_fraction, scale, offset_x, offset_y, width, height, fallback)


def record_seed(global_seed: int, source_id: str, repeat_index: int) -> int:
    return derive_seed(global_seed, source_id, repeat_index) % (2**31 - 1)


def compose_canvas(image: np.ndarray, placement: Placement, canvas_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Paste the resized source into an empty canvas; returns (canvas, keep-mask)."""

    resized = Image.fromarray(np.asarray(image, dtype=np.uint8)).resize(
        (placement.width, placement.height), resample=Image.BILINEAR
    )
    canvas = np.zeros((canvas_size, canvas_size, 3), dtype=np.uint8)
    valid = np.zeros((canvas_size, canvas_size), dtype=bool)
    ys = slice(placement.offset_y, placement.offset_y + placement.height)
    xs = slice(placement.offset_x, placement.offset_x + placement.width)
    canvas[ys, xs] = np.asarray(resized)
    valid[ys, xs] = True
    return canvas, valid


def match_subject(detections: Sequence[Detection], expected: CropRect, label: CropRect) -> Optional[Detection]:
    """The canvas detection that continues the source subject."""

    candidates = [d for d in detections if d.bbox.intersects(label)]
    if not candidates:
        return None
    best = max(candidates, key=lambda d: (iou(d.bbox, expected), d.bbox.intersection_area(expected)))
    if best.bbox.intersection_area(expected) <= 0:
        return None
    return best


def generate_record(
    source: SourceImage,
    backends: Backends,
    repeat_index: int,
    cfg: DatagenConfig,
    out_dir: str | Path,
    dominant: Optional[Detection] = None,
    caption: Optional[tuple[str, bool]] = None,
) -> DatasetRecord:
    """Run caption, placement, outpaint and re-detection for one amplification repeat."""

    out_dir = Path(out_dir)
    record_id = f"{source.id}-r{repeat_index}"
    seed = record_seed(cfg.seed, source.id, repeat_index)
    rng = np.random.default_rng(seed)
    image = source.load()

    if dominant is None:
        detections = backends.detector.detect_subjects(image, cfg.class_label)
        verdict = prefilter_source(image, detections, cfg)
        if not verdict.keep:
            raise RecordDiscarded(record_id, f"source failed pre-filter ({verdict.reason})")
        dominant = verdict.dominant

    text, warned = caption if caption is not None else safe_caption(backends.captioner, image)
    placement = sample_canvas_placement(ImageDims.of(image), rng, cfg.canvas_size, cfg.area_range)
    canvas, valid = compose_canvas(image, placement, cfg.canvas_size)
    label = placement.rect(cfg.canvas_size)

    try:
        outpainted = backends.outpainter.outpaint(
            OutpaintRequest(image=canvas, valid_mask=valid, prompt=text, seed=seed, allow_full_mask=True)
        )
    except (BackendUnavailableError, BackendResponseError) as exc:
        raise type(exc)(f"record {record_id}: {exc}") from exc

    expected = dominant.bbox.from_frame(label)
    post = backends.detector.detect_subjects(outpainted, cfg.class_label)
    subject = match_subject(post, expected, label)
    if subject is None:
        raise RecordDiscarded(record_id, "no subject found after outpainting")

    image_path = out_dir / "images" / f"{record_id}.png"
    mask_path = out_dir / "masks" / f"{record_id}.png"
    save_image(image_path, outpainted)
    save_mask(mask_path, subject.region.mask)

    return DatasetRecord(
        id=record_id,
        source_id=source.id,
        source_path=str(source.path),
        outpainted_path=str(image_path.relative_to(out_dir)),
        mask_path=str(mask_path.relative_to(out_dir)),
        caption=text,
        caption_warning=warned,
        subject_bbox=subject.bbox,
        pseudo_label=label,
        placement=asdict(placement),
        repeat_index=repeat_index,
        seed=seed,
    )


@dataclass
class GenerationStats:
    sources: int = 0
    prefiltered: Dict[str, int] = field(default_factory=dict)
    written: int = 0
    skipped_existing: int = 0
    discarded: int = 0
    caption_warnings: int = 0


def discover_sources(source_dir: str | Path) -> List[SourceImage]:
    return [SourceImage(id=path.stem, path=path) for path in list_images(source_dir)]


def _prepare_source(source: SourceImage, backends: Backends, cfg: DatagenConfig):
    image = source.load()
    detections = backends.detector.detect_subjects(image, cfg.class_label)
    verdict = prefilter_source(image, detections, cfg)
    caption = safe_caption(backends.captioner, image) if verdict.keep else ("", False)
    return verdict, caption


def run_generation(
    sources: Iterable[SourceImage],
    backends: Backends,
    cfg: DatagenConfig,
    manifest_path: str | Path,
    quiet: bool = False,
) -> GenerationStats:
    """Generate ``cfg.amplify`` records per kept source into a JSONL manifest.

    Records already in the manifest are skipped, so an interrupted run can be
    resumed. Workers produce records; this thread is the only writer.
    """

    manifest_path = Path(manifest_path)
    out_dir = manifest_path.parent
    done = completed_ids(manifest_path)
    sources = list(sources)
    stats = GenerationStats(sources=len(sources))

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        prepared = list(pool.map(lambda s: _prepare_source(s, backends, cfg), sources))

        jobs = []
        for source, (verdict, caption) in zip(sources, prepared):
            if not verdict.keep:
                stats.prefiltered[verdict.reason] = stats.prefiltered.get(verdict.reason, 0) + 1
                continue
            if caption[1]:
                stats.caption_warnings += 1
            for repeat in range(cfg.amplify):
                if f"{source.id}-r{repeat}" in done:
                    stats.skipped_existing += 1
                    continue
                jobs.append(
                    pool.submit(generate_record, source, backends, repeat, cfg, out_dir, verdict.dominant, caption)
                )

        with ManifestWriter(manifest_path) as writer:
            for job in progress(jobs, "outpainting", quiet):
                try:
                    record = job.result()
                except RecordDiscarded as exc:
                    log.info("%s", exc)
                    stats.discarded += 1
                    continue
                except BackendResponseError as exc:
                    log.warning("%s", exc)
                    stats.discarded += 1
                    continue
                writer.append(record.to_json())
                stats.written += 1

    log.info(
        "generation: %d sources, %d records written, %d discarded, %d already present",
        stats.sources,
        stats.written,
        stats.discarded,
        stats.skipped_existing,
    )
    return stats


def load_records(manifest_path: str | Path) -> List[DatasetRecord]:
    return [DatasetRecord.from_json(row) for row in read_jsonl(manifest_path)]
