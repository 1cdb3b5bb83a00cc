"""Crop-rectangle arithmetic and the IoU / boundary-displacement metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

_EDGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self) -> None:
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError(f"Image dimensions must be integers, got {self.width}x{self.height}.")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Image dimensions must be positive, got {self.width}x{self.height}.")

    @classmethod
    def of(cls, image: np.ndarray) -> "ImageDims":
        return cls(width=int(image.shape[1]), height=int(image.shape[0]))

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned rectangle in normalized image coordinates.

    ``x`` values are fractions of the image width and ``y`` values fractions of
    its height. Degenerate rectangles are rejected at construction.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"Crop coordinates must be finite, got {coords}.")
        if any(c < -_EDGE_TOLERANCE or c > 1 + _EDGE_TOLERANCE for c in coords):
            raise ValueError(f"Crop coordinates must lie in [0, 1], got {coords}.")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"Crop must have positive width and height, got {coords}.")

    @classmethod
    def clamped(cls, x1: float, y1: float, x2: float, y2: float, min_size: float = 1e-6) -> "CropRect":
        """Build a rect after clamping into the unit square and enforcing a minimum size."""

        x1, x2 = sorted((float(np.clip(x1, 0.0, 1.0)), float(np.clip(x2, 0.0, 1.0))))
        y1, y2 = sorted((float(np.clip(y1, 0.0, 1.0)), float(np.clip(y2, 0.0, 1.0))))
        if x2 - x1 < min_size:
            x1, x2 = _widen(x1, x2, min_size)
        if y2 - y1 < min_size:
            y1, y2 = _widen(y1, y2, min_size)
        return cls(x1, y1, x2, y2)

    @classmethod
    def from_pixels(cls, box: Sequence[float], dims: ImageDims) -> "CropRect":
        x1, y1, x2, y2 = box
        return cls(x1 / dims.width, y1 / dims.height, x2 / dims.width, y2 / dims.height)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "CropRect":
        if len(values) != 4:
            raise ValueError(f"A crop needs 4 coordinates, got {len(values)}.")
        return cls(*(float(v) for v in values))

    @classmethod
    def full(cls) -> "CropRect":
        return cls(0.0, 0.0, 1.0, 1.0)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_pixels(self, dims: ImageDims) -> Tuple[float, float, float, float]:
        return (self.x1 * dims.width, self.y1 * dims.height, self.x2 * dims.width, self.y2 * dims.height)

    def to_pixel_box(self, dims: ImageDims) -> Tuple[int, int, int, int]:
        """Integer pixel box that rounds outward, never empty."""

        x1, y1, x2, y2 = self.to_pixels(dims)
        ix1, iy1 = int(math.floor(x1 + 1e-6)), int(math.floor(y1 + 1e-6))
        ix2, iy2 = int(math.ceil(x2 - 1e-6)), int(math.ceil(y2 - 1e-6))
        ix2 = max(ix2, ix1 + 1)
        iy2 = max(iy2, iy1 + 1)
        return (
            min(max(ix1, 0), dims.width - 1),
            min(max(iy1, 0), dims.height - 1),
            min(ix2, dims.width),
            min(iy2, dims.height),
        )

    def intersection_area(self, other: "CropRect") -> float:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def intersects(self, other: "CropRect") -> bool:
        return self.intersection_area(other) > 0

    def contains(self, other: "CropRect", tol: float = _EDGE_TOLERANCE) -> bool:
        return (
            self.x1 <= other.x1 + tol
            and self.y1 <= other.y1 + tol
            and self.x2 >= other.x2 - tol
            and self.y2 >= other.y2 - tol
        )

    def contains_point(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2

    def hflip(self) -> "CropRect":
        return CropRect(1.0 - self.x2, self.y1, 1.0 - self.x1, self.y2)

    def to_frame(self, frame: "CropRect") -> "CropRect":
        """Re-express this rect in the normalized coordinates of ``frame``."""

        return CropRect.clamped(
            (self.x1 - frame.x1) / frame.width,
            (self.y1 - frame.y1) / frame.height,
            (self.x2 - frame.x1) / frame.width,
            (self.y2 - frame.y1) / frame.height,
        )

    def from_frame(self, frame: "CropRect") -> "CropRect":
        """Inverse of :meth:`to_frame`."""

        return CropRect.clamped(
            frame.x1 + self.x1 * frame.width,
            frame.y1 + self.y1 * frame.height,
            frame.x1 + self.x2 * frame.width,
            frame.y1 + self.y2 * frame.height,
        )


def _widen(lo: float, hi: float, size: float) -> Tuple[float, float]:
    mid = (lo + hi) / 2
    lo, hi = mid - size / 2, mid + size / 2
    if lo < 0:
        lo, hi = 0.0, size
    if hi > 1:
        lo, hi = 1.0 - size, 1.0
    return lo, hi


def mask_bbox(mask: np.ndarray) -> CropRect:
    """Tight normalized bounding box of the nonzero pixels of ``mask``."""

    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("Mask has no foreground pixels.")
    h, w = mask.shape[:2]
    return CropRect(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


@dataclass(frozen=True, eq=False)
class SubjectRegion:
    """Subject bounding box plus a binary raster mask aligned to the image grid."""

    bbox: CropRect
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.mask.ndim != 2:
            raise ValueError("Subject mask must be a 2-D raster.")
        if not np.any(self.mask):
            raise ValueError("Subject mask has no foreground pixels.")
        tight = mask_bbox(self.mask)
        h, w = self.mask.shape
        deltas = (
            abs(tight.x1 - self.bbox.x1) * w,
            abs(tight.y1 - self.bbox.y1) * h,
            abs(tight.x2 - self.bbox.x2) * w,
            abs(tight.y2 - self.bbox.y2) * h,
        )
        if max(deltas) > 1.0 + 1e-6:
            raise ValueError(f"Subject bbox {self.bbox.as_tuple()} is not the tight box of its mask.")

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "SubjectRegion":
        binary = np.asarray(mask).astype(bool)
        return cls(bbox=mask_bbox(binary), mask=binary)

    @property
    def dims(self) -> ImageDims:
        return ImageDims(width=int(self.mask.shape[1]), height=int(self.mask.shape[0]))

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.mask))


def iou(a: CropRect, b: CropRect) -> float:
    inter = a.intersection_area(b)
    if inter <= 0:
        return 0.0
    union = a.area + b.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def boundary_displacement(pred: CropRect, gt: CropRect) -> float:
    """Mean absolute displacement of the four normalized edges."""

    return (
        abs(pred.x1 - gt.x1) + abs(pred.x2 - gt.x2) + abs(pred.y1 - gt.y1) + abs(pred.y2 - gt.y2)
    ) / 4.0


def evaluate_against_labels(pred: CropRect, labels: Iterable[CropRect]) -> Tuple[float, float]:
    """IoU and displacement against the label with the highest IoU.

    Labels tied on IoU are broken by the smaller displacement, so the result
    does not depend on label order.
    """

    labels = list(labels)
    if not labels:
        raise ValueError("no ground truth")

    scores = [iou(pred, label) for label in labels]
    best = max(scores)
    disp = min(boundary_displacement(pred, label) for label, score in zip(labels, scores) if score >= best - 1e-12)
    return best, disp
