"""Overlay renders and training-curve figures."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from PIL import Image, ImageDraw

from core.geometry import CropRect, ImageDims

CROP_COLOR = (255, 48, 48)
SUBJECT_COLOR = (40, 180, 255)
EXTRA_COLOR = (255, 210, 0)


def _outline(draw: ImageDraw.ImageDraw, rect: CropRect, dims: ImageDims, color: tuple, width: int) -> None:
    x1, y1, x2, y2 = rect.to_pixel_box(dims)
    draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)], outline=color, width=width)


def draw_overlay(
    image: np.ndarray,
    crop: CropRect,
    subject_bbox: Optional[CropRect] = None,
    extra: Iterable[CropRect] = (),
    width: Optional[int] = None,
) -> np.ndarray:
    """Draw the crop and subject box at the image's own resolution."""

    dims = ImageDims.of(image)
    width = width or max(2, min(dims.width, dims.height) // 150)
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for rect in extra:
        _outline(draw, rect, dims, EXTRA_COLOR, max(1, width // 2))
    if subject_bbox is not None:
        _outline(draw, subject_bbox, dims, SUBJECT_COLOR, width)
    _outline(draw, crop, dims, CROP_COLOR, width)
    return np.asarray(canvas, dtype=np.uint8).copy()


def overlay_strip(images: Sequence[np.ndarray], height: int = 192, gap: int = 6) -> np.ndarray:
    """Resize every render to a common height and lay them out left to right."""

    if not images:
        raise ValueError("Nothing to lay out.")
    tiles = []
    for img in images:
        h, w = img.shape[:2]
        tiles.append(Image.fromarray(img).resize((max(1, round(w * height / h)), height), resample=Image.BILINEAR))
    strip = Image.new("RGB", (sum(t.width for t in tiles) + gap * (len(tiles) - 1), height), (255, 255, 255))
    x = 0
    for tile in tiles:
        strip.paste(tile, (x, 0))
        x += tile.width + gap
    return np.asarray(strip, dtype=np.uint8).copy()


def training_curve_figure(history: pd.DataFrame, columns: Sequence[str] = ("train_total", "val_total")) -> go.Figure:
    fig = go.Figure()
    for column in columns:
        if column in history:
            fig.add_trace(go.Scatter(x=history["epoch"], y=history[column], mode="lines+markers", name=column))
    fig.update_layout(
        title="Training curves",
        xaxis_title="Epoch",
        yaxis_title="Loss",
        template="plotly_white",
    )
    return fig


def write_training_curve(history: pd.DataFrame, path: str | Path, columns: Sequence[str] = ("train_total", "val_total")) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    training_curve_figure(history, columns).write_html(str(path), include_plotlyjs="cdn")
    return path
