"""Enclosing-view sampling: the model input is a common-aspect window of the
outpainted canvas that contains the pseudo-label."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.assumptions import (
    VIEW_ASPECT_RANGE,
    VIEW_EDGE_SNAP_PROBABILITY,
    VIEW_FLIP_PROBABILITY,
    VIEW_MAX_ATTEMPTS,
    VIEW_SCALE_RANGE,
)
from core.datagen import DatasetRecord
from core.geometry import CropRect, ImageDims, SubjectRegion
from utils.data_loader import save_image, write_jsonl
from utils.log import get_logger
from utils.render import draw_overlay
from utils.rng import make_rng

log = get_logger(__name__)

EDGES = ("left", "top", "right", "bottom")


@dataclass(frozen=True)
class ViewParams:
    aspect_range: tuple = VIEW_ASPECT_RANGE
    scale_range: tuple = VIEW_SCALE_RANGE
    flip_probability: float = VIEW_FLIP_PROBABILITY
    snap_probability: float = VIEW_EDGE_SNAP_PROBABILITY
    max_attempts: int = VIEW_MAX_ATTEMPTS

    def __post_init__(self) -> None:
        lo, hi = self.aspect_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"Aspect range must satisfy 1 <= lo <= hi, got {self.aspect_range}.")
        lo, hi = self.scale_range
        if not 1.0 <= lo <= hi:
            raise ValueError(f"Scale range must satisfy 1 <= lo <= hi, got {self.scale_range}.")
        if self.max_attempts <= 0:
            raise ValueError("max_attempts must be positive.")

    @property
    def min_label_share(self) -> float:
        """Smallest label area / view area a view may have (1/4 for scale <= 2)."""

        return 1.0 / self.scale_range[1] ** 2


@dataclass(frozen=True)
class ViewSpec:
    """How a view was drawn. ``rect`` is in canvas-normalized coordinates.

    ``scale_bounds`` is the interval the scale was drawn from: the configured
    range cut down to what the canvas, the snapped edge and the minimum label
    share allow for this label.
    """

    rect: CropRect
    aspect: float
    scale: float
    landscape: bool
    flipped: bool
    snapped_edge: Optional[str] = None
    fallback: bool = False
    degenerate: bool = False
    scale_bounds: Optional[Tuple[float, float]] = None

    @property
    def offset(self) -> tuple:
        return (self.rect.x1, self.rect.y1)


@dataclass(eq=False)
class TrainingPair:
    record_id: str
    view_image: np.ndarray
    view_subject: Optional[SubjectRegion]
    label: CropRect
    subject_bbox: CropRect
    view_spec: ViewSpec

    def canvas_label(self) -> CropRect:
        return self.label.from_frame(self.view_spec.rect)


@dataclass(frozen=True)
class _Axis:
    """Label extent ``[lo, hi]`` on one canvas axis of length ``size``."""

    lo: float
    hi: float
    size: float

    @property
    def extent(self) -> float:
        return self.hi - self.lo

    def room(self, edge: str) -> float:
        # a view snapped to the label's start edge extends towards the far side, and vice versa
        return self.size - self.lo if edge in ("left", "top") else self.hi


@dataclass(frozen=True)
class _Frame:
    """Label geometry seen along the view's long axis and across it."""

    along: _Axis
    across: _Axis
    longest: float
    label_area: float
    snap_along: Optional[str]
    snap_across: Optional[str]

    @classmethod
    def build(cls, box: tuple, canvas: ImageDims, landscape: bool, snap: Optional[str]) -> "_Frame":
        lx1, ly1, lx2, ly2 = box
        x_axis, y_axis = _Axis(lx1, lx2, float(canvas.width)), _Axis(ly1, ly2, float(canvas.height))
        along, across = (x_axis, y_axis) if landscape else (y_axis, x_axis)
        along_edges = ("left", "right") if landscape else ("top", "bottom")
        return cls(
            along,
            across,
            max(lx2 - lx1, ly2 - ly1),
            (lx2 - lx1) * (ly2 - ly1),
            snap if snap in along_edges else None,
            snap if snap is not None and snap not in along_edges else None,
        )

    def scale_bounds(self, params: ViewParams) -> Optional[Tuple[float, float]]:
        """Scales for which some allowed aspect gives a valid view, or None."""

        a_min, a_max = params.aspect_range
        share = params.min_label_share
        L = self.longest
        lo = max(params.scale_range[0], a_min * self.across.extent / L)
        limits = [
            params.scale_range[1],
            self.along.size / L,
            a_max * self.across.size / L,
            math.sqrt(a_max * self.label_area / share) / L,
            self.along.extent / (share * L),
        ]
        if self.snap_along:
            limits.append(self.along.room(self.snap_along) / L)
        if self.snap_across:
            limits.append(a_max * self.across.room(self.snap_across) / L)
        hi = min(limits)
        return (lo, hi) if lo <= hi else None

    def aspect_bounds(self, scale: float, params: ViewParams) -> Tuple[float, float]:
        view_long = scale * self.longest
        lower = [
            params.aspect_range[0],
            view_long / self.across.size,
            view_long**2 * params.min_label_share / self.label_area,
        ]
        if self.snap_across:
            lower.append(view_long / self.across.room(self.snap_across))
        hi = min(params.aspect_range[1], view_long / self.across.extent)
        return min(max(lower), hi), hi


def _orientation(lw: float, lh: float, rng: np.random.Generator, params: ViewParams) -> tuple:
    """(landscape, flipped); square labels pick an orientation without a flip branch."""

    if abs(lw - lh) < 1e-9:
        return bool(rng.random() < 0.5), False
    flipped = bool(rng.random() < params.flip_probability)
    return (lw > lh) != flipped, flipped


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if hi <= lo:
        return lo
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _place(lo: float, hi: float, rng: np.random.Generator) -> float:
    return lo if hi <= lo else float(rng.uniform(lo, hi))


def _outward(x1: float, y1: float, x2: float, y2: float, dims: ImageDims) -> CropRect:
    box = (
        max(0, math.floor(x1 + 1e-9)),
        max(0, math.floor(y1 + 1e-9)),
        min(dims.width, math.ceil(x2 - 1e-9)),
        min(dims.height, math.ceil(y2 - 1e-9)),
    )
    return CropRect.from_pixels(box, dims)


def _valid(view: CropRect, label: CropRect, params: ViewParams) -> bool:
    return view.contains(label) and label.area >= params.min_label_share * view.area - 1e-12


def sample_view_rect(
    label: CropRect,
    canvas: ImageDims,
    rng: np.random.Generator,
    params: ViewParams = ViewParams(),
) -> ViewSpec:
    """Draw a view that contains ``label`` (pixel-aligned, rounded outward).

    Each attempt draws an orientation and an optional snapped edge. The scale
    is then uniform over the interval where a valid view exists, and the aspect
    is log-uniform over what that scale allows. Attempts whose combination is
    infeasible are rejected; after ``params.max_attempts`` the tightest view is
    used. Every returned view has label area / view area >= 1/4.
    """

    W, H = float(canvas.width), float(canvas.height)
    box = label.to_pixels(canvas)
    lx1, ly1, lx2, ly2 = box
    lw, lh = lx2 - lx1, ly2 - ly1

    if lw >= W - 1 and lh >= H - 1:
        log.warning("pseudo-label covers the whole canvas; using it as the view")
        return ViewSpec(label, max(lw, lh) / min(lw, lh), 1.0, lw >= lh, False, degenerate=True)

    for _attempt in range(params.max_attempts):
        landscape, flipped = _orientation(lw, lh, rng, params)
        snap = EDGES[int(rng.integers(0, 4))] if rng.random() < params.snap_probability else None
        frame = _Frame.build(box, canvas, landscape, snap)
        bounds = frame.scale_bounds(params)
        if bounds is None:
            continue

        scale = float(rng.uniform(*bounds))
        aspect = _log_uniform(rng, *frame.aspect_bounds(scale, params))
        view_long = scale * frame.longest
        vw, vh = (view_long, view_long / aspect) if landscape else (view_long / aspect, view_long)

        x_lo, x_hi = max(0.0, lx2 - vw), min(lx1, W - vw)
        y_lo, y_hi = max(0.0, ly2 - vh), min(ly1, H - vh)
        if snap == "left":
            x_lo = x_hi = lx1
        elif snap == "right":
            x_lo = x_hi = lx2 - vw
        elif snap == "top":
            y_lo = y_hi = ly1
        elif snap == "bottom":
            y_lo = y_hi = ly2 - vh

        x, y = _place(x_lo, x_hi, rng), _place(y_lo, y_hi, rng)
        rect = _outward(x, y, x + vw, y + vh, canvas)
        # outward rounding can push a view drawn at the share limit just past it
        if not _valid(rect, label, params):
            continue
        return ViewSpec(rect, aspect, scale, landscape, flipped, snap, scale_bounds=bounds)

    return _tightest_view(label, canvas, params)


def _tightest_view(label: CropRect, canvas: ImageDims, params: ViewParams) -> ViewSpec:
    """Smallest view in the label's own orientation with the closest allowed aspect."""

    W, H = float(canvas.width), float(canvas.height)
    lx1, ly1, lx2, ly2 = label.to_pixels(canvas)
    lw, lh = lx2 - lx1, ly2 - ly1
    landscape = lw >= lh
    ratio = max(lw, lh) / min(lw, lh)
    aspect = min(max(ratio, params.aspect_range[0]), params.aspect_range[1])
    if landscape:
        vw = max(lw, lh * aspect)
        vh = vw / aspect
    else:
        vh = max(lh, lw * aspect)
        vw = vh / aspect
    vw, vh = min(vw, W), min(vh, H)
    cx, cy = (lx1 + lx2) / 2, (ly1 + ly2) / 2
    x = min(max(cx - vw / 2, 0.0), W - vw)
    y = min(max(cy - vh / 2, 0.0), H - vh)
    rect = _outward(x, y, x + vw, y + vh, canvas)
    if not _valid(rect, label, params):
        log.warning("pseudo-label is too elongated for any allowed view; using it as the view")
        rect = _outward(lx1, ly1, lx2, ly2, canvas)
        return ViewSpec(rect, ratio, 1.0, landscape, False, fallback=True, degenerate=True)
    log.debug("view sampling fell back to the tightest containing view")
    return ViewSpec(rect, max(vw, vh) / min(vw, vh), max(vw, vh) / max(lw, lh), landscape, False, fallback=True)


def crop_to_view(image: np.ndarray, view: CropRect) -> np.ndarray:
    x1, y1, x2, y2 = view.to_pixel_box(ImageDims.of(image))
    return np.ascontiguousarray(np.asarray(image)[y1:y2, x1:x2])


def sample_enclosing_view(
    record: DatasetRecord,
    rng: np.random.Generator,
    root: Optional[str | Path] = None,
    image: Optional[np.ndarray] = None,
    subject: Optional[SubjectRegion] = None,
    params: ViewParams = ViewParams(),
) -> TrainingPair:
    """Cut a training pair out of a record's outpainted canvas."""

    image = record.load_image(root) if image is None else image
    subject = record.load_subject(root) if subject is None else subject
    spec = sample_view_rect(record.pseudo_label, ImageDims.of(image), rng, params)

    view_image = crop_to_view(image, spec.rect)
    view_mask = crop_to_view(subject.mask, spec.rect)
    view_subject = SubjectRegion.from_mask(view_mask) if view_mask.any() else None
    label = record.pseudo_label.to_frame(spec.rect)
    subject_bbox = view_subject.bbox if view_subject is not None else record.subject_bbox.to_frame(spec.rect)
    return TrainingPair(record.id, view_image, view_subject, label, subject_bbox, spec)


def dump_pairs(
    records: Sequence[DatasetRecord],
    out_dir: str | Path,
    n: int,
    seed: int = 0,
    root: Optional[str | Path] = None,
) -> Path:
    """Write ``n`` sampled pairs with label overlays for inspection."""

    out_dir = Path(out_dir)
    rows: List[Dict] = []
    kept = [r for r in records if r.kept]
    for index in range(min(n, len(kept) * 8)):
        record = kept[index % len(kept)]
        pair = sample_enclosing_view(record, make_rng(seed, "pairs", index), root)
        path = save_image(out_dir / f"pair-{index:04d}.png", draw_overlay(pair.view_image, pair.label, pair.subject_bbox))
        rows.append(
            {
                "record_id": record.id,
                "image": path.name,
                "label": pair.label.to_list(),
                "view": pair.view_spec.rect.to_list(),
                "aspect": pair.view_spec.aspect,
                "scale": pair.view_spec.scale,
                "flipped": pair.view_spec.flipped,
                "snapped_edge": pair.view_spec.snapped_edge,
                "fallback": pair.view_spec.fallback,
            }
        )
    return write_jsonl(out_dir / "pairs.jsonl", rows)
