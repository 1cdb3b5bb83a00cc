"""Training losses for the crop regressor and the binary heads.

All functions take ``(..., 4)`` tensors of ``x1, y1, x2, y2`` coordinates (a
:class:`CropRect` is accepted too) and reduce by the mean over the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Union

import torch

from config.assumptions import ANCHOR_LOSS_WEIGHT, BCE_EPS, BOUNDARY_LOSS_WEIGHT, BOUNDARY_MARGIN
from core.geometry import CropRect

RectLike = Union[torch.Tensor, CropRect]


def as_rect_tensor(rect: RectLike, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(rect, CropRect):
        dtype = like.dtype if like is not None else torch.float64
        device = like.device if like is not None else None
        return torch.tensor(rect.as_tuple(), dtype=dtype, device=device)
    return rect


def regression_l1(blended: RectLike, label: RectLike) -> torch.Tensor:
    """Mean absolute difference over the four coordinates."""

    blended = as_rect_tensor(blended)
    label = as_rect_tensor(label, blended)
    return (blended - label).abs().mean()


def per_anchor_l1(proposals: torch.Tensor, label: RectLike) -> torch.Tensor:
    """L1 of every anchor proposal to the label, averaged over all anchors.

    ``proposals`` is ``(B, G, G, 4)`` or ``(B, N, 4)``; masking plays no part.
    """

    label = as_rect_tensor(label, proposals)
    batch = proposals.shape[0] if proposals.dim() > 2 else 1
    flat = proposals.reshape(batch, -1, 4)
    target = label.reshape(-1, 1, 4) if label.dim() > 1 else label.reshape(1, 1, 4)
    return (flat - target).abs().mean()


def subject_boundary_loss(
    blended: RectLike,
    label: RectLike,
    subject_bbox: RectLike,
    margin: float = BOUNDARY_MARGIN,
) -> torch.Tensor:
    """Hinge on crop edges that come within ``margin`` of the subject box.

    The margin is a fraction of the subject width for x edges and of its height
    for y edges. A side only counts when the label itself clears the subject by
    at least the margin on that side.
    """

    blended = as_rect_tensor(blended)
    label = as_rect_tensor(label, blended)
    subject = as_rect_tensor(subject_bbox, blended)
    blended, label, subject = torch.broadcast_tensors(
        blended.reshape(-1, 4), label.reshape(-1, 4), subject.reshape(-1, 4)
    )

    sw = (subject[:, 2] - subject[:, 0]).clamp_min(0)
    sh = (subject[:, 3] - subject[:, 1]).clamp_min(0)
    margins = torch.stack([sw, sh, sw, sh], dim=1) * margin

    def clearance(rect: torch.Tensor) -> torch.Tensor:
        return torch.stack(
            [
                subject[:, 0] - rect[:, 0],
                subject[:, 1] - rect[:, 1],
                rect[:, 2] - subject[:, 2],
                rect[:, 3] - subject[:, 3],
            ],
            dim=1,
        )

    gate = (clearance(label) >= margins).to(blended.dtype)
    hinge = torch.relu(margins - clearance(blended))
    return (gate * hinge).sum(dim=1).mean()


def binary_ce(score: torch.Tensor | float, target: torch.Tensor | float, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross-entropy on probabilities clamped to ``(eps, 1 - eps)``."""

    score = torch.as_tensor(score, dtype=torch.float64 if not torch.is_tensor(score) else None)
    target = torch.as_tensor(target, dtype=score.dtype, device=score.device)
    s = score.clamp(eps, 1.0 - eps)
    return -(target * torch.log(s) + (1.0 - target) * torch.log(1.0 - s)).mean()


@dataclass(frozen=True)
class LossWeights:
    anchor: float = ANCHOR_LOSS_WEIGHT
    boundary: float = BOUNDARY_LOSS_WEIGHT
    margin: float = BOUNDARY_MARGIN


@dataclass(frozen=True)
class LossBreakdown:
    main_l1: float
    per_anchor_l1: float
    subject_boundary: float
    total: float
    weights: LossWeights

    def as_dict(self) -> Dict[str, float]:
        row = asdict(self)
        row.pop("weights")
        return row


def cropper_loss(
    proposals: torch.Tensor,
    blended: torch.Tensor,
    label: torch.Tensor,
    subject_bbox: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, LossBreakdown]:
    """``main + anchor_weight * per_anchor + boundary_weight * boundary``."""

    main = regression_l1(blended, label)
    anchor = per_anchor_l1(proposals, label)
    boundary = subject_boundary_loss(blended, label, subject_bbox, weights.margin)
    total = main + weights.anchor * anchor + weights.boundary * boundary
    breakdown = LossBreakdown(
        main_l1=float(main.detach()),
        per_anchor_l1=float(anchor.detach()),
        subject_boundary=float(boundary.detach()),
        total=float(total.detach()),
        weights=weights,
    )
    return total, breakdown
