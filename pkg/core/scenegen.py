"""Procedural scenes with a known subject and a known well-framed crop.

A scene is a flat-shaded shape on a low-saturation background. The ideal crop
frames the subject with either a centered or a rule-of-thirds composition; the
pixels inside that crop play the role of a professionally framed photo.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from core.geometry import CropRect, ImageDims, SubjectRegion, mask_bbox
from utils.data_loader import save_image, save_mask, write_jsonl
from utils.log import get_logger

log = get_logger(__name__)

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (210, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 210),
    "yellow": (230, 200, 30),
    "orange": (240, 130, 20),
    "purple": (150, 50, 190),
}

MIN_SUBJECT_PIXELS = 8
SUBJECT_WIDTH_RANGE = (0.14, 0.28)


class SubjectShape(str, Enum):
    ELLIPSE = "ellipse"
    ROUNDED_RECT = "rounded-rect"
    SILHOUETTE = "silhouette"

    @property
    def noun(self) -> str:
        return {"ellipse": "ellipse", "rounded-rect": "rounded rectangle", "silhouette": "silhouette"}[self.value]


class FramingRule(str, Enum):
    CENTERED = "centered"
    THIRDS = "rule-of-thirds"


class Background(str, Enum):
    NOISE = "noise"
    GRADIENT = "gradient"


def caption_for(color: str, shape: SubjectShape) -> str:
    return f"a photo of a {color} {shape.noun}"


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one scene; unset fields are drawn from ``seed``."""

    seed: int
    canvas: ImageDims = field(default_factory=lambda: ImageDims(384, 288))
    subject_shape: Optional[SubjectShape] = None
    subject_color: Optional[str] = None
    background: Optional[Background] = None
    framing_rule: FramingRule = FramingRule.CENTERED
    padding: float = 0.08
    subject_box: Optional[CropRect] = None
    distractors: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.padding < 0.5:
            raise ValueError(f"Padding must be in (0, 0.5), got {self.padding}.")
        if self.subject_color is not None and self.subject_color not in PALETTE:
            raise ValueError(f"Unknown subject color '{self.subject_color}'; choose from {sorted(PALETTE)}.")
        if self.distractors < 0:
            raise ValueError("Distractor count cannot be negative.")


@dataclass(frozen=True, eq=False)
class Scene:
    image: np.ndarray
    subject: SubjectRegion
    ideal_crop: CropRect
    caption: str
    spec: SceneSpec
    distractors: List[CropRect] = field(default_factory=list)

    def source_image(self) -> np.ndarray:
        """The pixels inside the ideal crop: the well-framed photo."""

        x1, y1, x2, y2 = self.ideal_crop.to_pixel_box(ImageDims.of(self.image))
        return self.image[y1:y2, x1:x2].copy()


def frame_subject(bbox: CropRect, rule: FramingRule, padding: float, corner: Tuple[int, int] = (0, 0)) -> Tuple[float, float, float, float]:
    """Ideal crop around ``bbox`` as raw coordinates (may leave the unit square).

    ``corner`` picks the thirds intersection holding the subject center:
    0 = first third, 1 = second third, per axis.
    """

    if rule is FramingRule.CENTERED:
        return (bbox.x1 - padding, bbox.y1 - padding, bbox.x2 + padding, bbox.y2 + padding)

    fx = (1.0, 2.0)[corner[0]] / 3.0
    fy = (1.0, 2.0)[corner[1]] / 3.0
    cw = 3.0 * (bbox.width / 2 + padding)
    ch = 3.0 * (bbox.height / 2 + padding)
    cx, cy = bbox.center
    x1, y1 = cx - fx * cw, cy - fy * ch
    return (x1, y1, x1 + cw, y1 + ch)


def _crop_extent(bw: float, bh: float, rule: FramingRule, padding: float) -> Tuple[float, float]:
    if rule is FramingRule.CENTERED:
        return bw + 2 * padding, bh + 2 * padding
    return 3.0 * (bw / 2 + padding), 3.0 * (bh / 2 + padding)


def _render_background(kind: Background, dims: ImageDims, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(95, 175)
    tint = rng.uniform(-12, 12, size=3)
    if kind is Background.NOISE:
        grid = rng.uniform(0, 255, size=(int(rng.integers(3, 8)), int(rng.integers(3, 8)))).astype(np.uint8)
        smooth = np.asarray(
            Image.fromarray(grid).resize((dims.width, dims.height), resample=Image.BILINEAR), dtype=np.float32
        )
        texture = (smooth / 255.0 - 0.5) * rng.uniform(40, 70)
    else:
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0 : dims.height, 0 : dims.width].astype(np.float32)
        ramp = (np.cos(angle) * xx / dims.width + np.sin(angle) * yy / dims.height)
        ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-6) - 0.5
        texture = ramp * rng.uniform(40, 80)
    grain = rng.normal(0, 3.0, size=(dims.height, dims.width, 1))
    image = base + tint[None, None, :] + texture[..., None] + grain
    return np.clip(image, 0, 255).astype(np.uint8)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: SubjectShape, box: Tuple[int, int, int, int], fill: int | Tuple[int, int, int]) -> None:
    x0, y0, x1, y1 = box
    x1, y1 = x1 - 1, y1 - 1
    w, h = x1 - x0, y1 - y0
    if shape is SubjectShape.ELLIPSE:
        draw.ellipse([x0, y0, x1, y1], fill=fill)
    elif shape is SubjectShape.ROUNDED_RECT:
        draw.rounded_rectangle([x0, y0, x1, y1], radius=max(1, int(0.2 * min(w, h))), fill=fill)
    else:
        neck = y0 + int(round(0.36 * h))
        draw.ellipse([x0 + int(round(0.3 * w)), y0, x0 + int(round(0.7 * w)), y0 + int(round(0.38 * h))], fill=fill)
        draw.polygon(
            [(x0 + int(round(0.2 * w)), neck), (x0 + int(round(0.8 * w)), neck), (x1, y1), (x0, y1)],
            fill=fill,
        )


def _pixel_box(rect: CropRect, dims: ImageDims) -> Tuple[int, int, int, int]:
    x1, y1, x2, y2 = rect.to_pixels(dims)
    return int(round(x1)), int(round(y1)), int(round(x2)), int(round(y2))


def _sample_subject_box(spec: SceneSpec, shape: SubjectShape, corner: Tuple[int, int], rng: np.random.Generator) -> CropRect:
    dims = spec.canvas
    if shape is SubjectShape.SILHOUETTE:
        ratio = rng.uniform(1.3, 1.8)
    else:
        ratio = rng.uniform(0.7, 1.4)

    # widest subject whose ideal crop still fits inside the canvas
    if spec.framing_rule is FramingRule.CENTERED:
        max_bw = 1.0 - 2 * spec.padding
        max_bh = 1.0 - 2 * spec.padding
    else:
        max_bw = 2.0 * (1.0 / 3.0 - spec.padding)
        max_bh = 2.0 * (1.0 / 3.0 - spec.padding)
    max_bw = min(max_bw, max_bh * dims.height / (ratio * dims.width))
    lo, hi = SUBJECT_WIDTH_RANGE
    hi = min(hi, max_bw)
    if hi * dims.width < MIN_SUBJECT_PIXELS or hi <= 0:
        raise ValueError(
            f"Canvas {dims.width}x{dims.height} is too small for a subject with padding {spec.padding}."
        )
    bw = rng.uniform(min(lo, hi), hi)
    bh = bw * ratio * dims.width / dims.height

    cw, ch = _crop_extent(bw, bh, spec.framing_rule, spec.padding)
    crop_x1 = rng.uniform(0.0, 1.0 - cw)
    crop_y1 = rng.uniform(0.0, 1.0 - ch)
    if spec.framing_rule is FramingRule.CENTERED:
        x1, y1 = crop_x1 + spec.padding, crop_y1 + spec.padding
    else:
        cx = crop_x1 + cw * (1.0, 2.0)[corner[0]] / 3.0
        cy = crop_y1 + ch * (1.0, 2.0)[corner[1]] / 3.0
        x1, y1 = cx - bw / 2, cy - bh / 2
    return CropRect.clamped(x1, y1, x1 + bw, y1 + bh)


def _place_distractors(
    count: int,
    image: Image.Image,
    taken: np.ndarray,
    avoid: CropRect,
    subject_color: str,
    subject_size: Tuple[int, int],
    rng: np.random.Generator,
) -> List[CropRect]:
    dims = ImageDims(*image.size)
    draw = ImageDraw.Draw(image)
    colors = [c for c in PALETTE if c != subject_color]
    placed: List[CropRect] = []
    for _ in range(count):
        for _attempt in range(50):
            scale = rng.uniform(0.3, 0.6)
            w = max(MIN_SUBJECT_PIXELS, int(subject_size[0] * scale))
            h = max(MIN_SUBJECT_PIXELS, int(subject_size[1] * scale))
            if w >= dims.width or h >= dims.height:
                break
            x0 = int(rng.integers(0, dims.width - w))
            y0 = int(rng.integers(0, dims.height - h))
            rect = CropRect.from_pixels((x0, y0, x0 + w, y0 + h), dims)
            if rect.intersects(avoid) or taken[max(0, y0 - 2) : y0 + h + 2, max(0, x0 - 2) : x0 + w + 2].any():
                continue
            shape = list(SubjectShape)[int(rng.integers(0, len(SubjectShape)))]
            _draw_shape(draw, shape, (x0, y0, x0 + w, y0 + h), PALETTE[colors[int(rng.integers(0, len(colors)))]])
            taken[y0 : y0 + h, x0 : x0 + w] = True
            placed.append(rect)
            break
        else:
            log.debug("could not place distractor without overlap")
    return placed


def generate_scene(spec: SceneSpec) -> Scene:
    """Render the scene described by ``spec``; identical specs give identical pixels."""

    rng = np.random.default_rng(spec.seed)
    dims = spec.canvas
    shapes = list(SubjectShape)
    shape = spec.subject_shape or shapes[int(rng.integers(0, len(shapes)))]
    color = spec.subject_color or list(PALETTE)[int(rng.integers(0, len(PALETTE)))]
    background = spec.background or list(Background)[int(rng.integers(0, len(Background)))]
    corner = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))

    if spec.subject_box is not None:
        box = spec.subject_box
        raw = frame_subject(box, spec.framing_rule, spec.padding, corner)
        if min(raw) < -1e-9 or max(raw) > 1 + 1e-9:
            raise ValueError(f"Canvas too small: the ideal crop {raw} for subject {box.as_tuple()} leaves the frame.")
    else:
        box = _sample_subject_box(spec, shape, corner, rng)

    px = _pixel_box(box, dims)
    if px[2] - px[0] < MIN_SUBJECT_PIXELS or px[3] - px[1] < MIN_SUBJECT_PIXELS:
        raise ValueError(f"Canvas {dims.width}x{dims.height} is too small for the requested subject.")

    canvas = Image.fromarray(_render_background(background, dims, rng))
    mask_img = Image.new("L", (dims.width, dims.height), 0)
    _draw_shape(ImageDraw.Draw(mask_img), shape, px, 255)
    mask = np.asarray(mask_img) > 0
    subject = SubjectRegion(bbox=mask_bbox(mask), mask=mask)

    raw = frame_subject(subject.bbox, spec.framing_rule, spec.padding, corner)
    ideal_crop = CropRect.clamped(*raw)

    _draw_shape(ImageDraw.Draw(canvas), shape, px, PALETTE[color])
    distractors = _place_distractors(
        spec.distractors, canvas, mask.copy(), ideal_crop, color, (px[2] - px[0], px[3] - px[1]), rng
    )

    return Scene(
        image=np.asarray(canvas, dtype=np.uint8),
        subject=subject,
        ideal_crop=ideal_crop,
        caption=caption_for(color, shape),
        spec=spec,
        distractors=distractors,
    )


def scene_spec_for(index: int, seed: int, **overrides) -> SceneSpec:
    """Deterministic spec for the ``index``-th scene of a corpus."""

    rng = np.random.default_rng([seed, index])
    rule = FramingRule.CENTERED if rng.random() < 0.5 else FramingRule.THIRDS
    padding = float(rng.uniform(0.05, 0.12)) if rule is FramingRule.CENTERED else float(rng.uniform(0.03, 0.07))
    spec = SceneSpec(seed=int(rng.integers(0, 2**31 - 1)), framing_rule=rule, padding=padding)
    return replace(spec, **overrides) if overrides else spec


def write_scene_corpus(
    out_dir: str | Path,
    n_sources: int,
    n_eval: int,
    seed: int = 0,
    **spec_overrides,
) -> Dict[str, Path]:
    """Write scenegen sources plus a held-out evaluation set.

    Sources are the ideal-crop regions of ``n_sources`` scenes. The evaluation
    manifest lists ``n_eval`` further full scenes labeled with their ideal crop.
    """

    out_dir = Path(out_dir)
    source_dir = out_dir / "sources"
    eval_dir = out_dir / "eval"
    for index in range(n_sources):
        scene = generate_scene(scene_spec_for(index, seed, **spec_overrides))
        save_image(source_dir / f"scene-{index:05d}.png", scene.source_image())

    rows = []
    for index in range(n_sources, n_sources + n_eval):
        scene = generate_scene(scene_spec_for(index, seed, **spec_overrides))
        image_path = eval_dir / "images" / f"scene-{index:05d}.png"
        mask_path = eval_dir / "masks" / f"scene-{index:05d}.png"
        save_image(image_path, scene.image)
        save_mask(mask_path, scene.subject.mask)
        rows.append(
            {
                "id": f"scene-{index:05d}",
                "image_path": str(image_path.relative_to(out_dir)),
                "subject_mask_path": str(mask_path.relative_to(out_dir)),
                "subject_bbox": scene.subject.bbox.to_list(),
                "labels": [scene.ideal_crop.to_list()],
                "caption": scene.caption,
            }
        )
    manifest = write_jsonl(out_dir / "eval_manifest.jsonl", rows)
    log.info("wrote %d sources and %d eval scenes to %s", n_sources, n_eval, out_dir)
    return {"sources": source_dir, "eval_manifest": manifest, "root": out_dir}
