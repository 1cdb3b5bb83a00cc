"""Subject-aware crop regression model and its variants.

The base model turns a 4-channel input (RGB + subject mask) into a 16x16 grid
of crop proposals, scores every proposal from features pooled inside and
outside it, and blends the proposals of anchors lying on the subject with a
masked softmax. Variants: ``conditional`` (transformer decoder attending to an
encoded area/aspect signal), ``unet`` (per-pixel crop mask) and ``ranking``
(real-vs-random crop classifier over a candidate grid).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from torch import nn
from torchvision.ops import roi_align

from config.assumptions import (
    AUX_INPUT_SIZE,
    CHECKPOINT_VERSION,
    COMPOSITION_HIDDEN,
    CONDITIONING_DROPOUT,
    CONDITIONING_HIDDEN,
    ENCODER_HEADS,
    ENCODER_LAYERS,
    FEATURE_GRID,
    FUSED_CHANNELS,
    IMAGENET_MEAN,
    IMAGENET_STD,
    MODEL_INPUT_SIZE,
    ROI_POOL,
)
from core.geometry import CropRect, ImageDims, SubjectRegion
from utils.errors import UserInputError
from utils.log import get_logger

log = get_logger(__name__)

VARIANTS = ("base", "conditional", "unet", "ranking")
BACKBONES = ("small", "resnet50")
CONDITIONING_MODES = ("area", "area_aspect")


@dataclass
class ModelConfig:
    input_size: int = MODEL_INPUT_SIZE
    feature_grid: int = FEATURE_GRID
    fused_channels: int = FUSED_CHANNELS
    encoder_heads: int = ENCODER_HEADS
    encoder_layers: int = ENCODER_LAYERS
    roi_pool: int = ROI_POOL
    composition_hidden: int = COMPOSITION_HIDDEN
    backbone: str = "small"
    pretrained: bool = False
    variant: str = "base"
    subject_aware: bool = True
    conditioning: str = "area"
    conditioning_hidden: int = CONDITIONING_HIDDEN
    conditioning_dropout: float = CONDITIONING_DROPOUT
    aux_input_size: int = AUX_INPUT_SIZE
    # reserved for auxiliary depth/edge channels; no extractor ships
    extra_channels: int = 0
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown variant '{self.variant}'; expected one of {VARIANTS}.")
        if self.backbone not in BACKBONES:
            raise ValueError(f"Unknown backbone '{self.backbone}'; expected one of {BACKBONES}.")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"Unknown conditioning '{self.conditioning}'; expected one of {CONDITIONING_MODES}.")
        sizes = (
            self.input_size,
            self.feature_grid,
            self.fused_channels,
            self.encoder_heads,
            self.encoder_layers,
            self.roi_pool,
            self.composition_hidden,
            self.aux_input_size,
        )
        if any(v <= 0 for v in sizes):
            raise ValueError("All model dimensions must be positive.")
        if self.fused_channels % self.encoder_heads:
            raise ValueError("fused_channels must be divisible by encoder_heads.")
        if self.extra_channels:
            raise ValueError("Auxiliary input channels are reserved; no extractor is available.")
        self.mean = tuple(float(v) for v in self.mean)
        self.std = tuple(float(v) for v in self.std)

    @property
    def in_channels(self) -> int:
        return 4 + self.extra_channels

    @property
    def anchors(self) -> int:
        return self.feature_grid**2

    @property
    def model_input_size(self) -> int:
        return self.aux_input_size if self.variant in ("unet", "ranking") else self.input_size

    @property
    def conditioning_dim(self) -> int:
        return 1 if self.conditioning == "area" else 3


@dataclass(frozen=True)
class Conditioning:
    area: float
    aspect: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        if not 0 < self.area <= 1:
            raise ValueError(f"Area conditioning must be in (0, 1], got {self.area}.")
        hw, wh = self.aspect
        if hw <= 0 or wh <= 0 or abs(hw * wh - 1.0) > 1e-6:
            raise ValueError(f"Aspect conditioning must be reciprocal positives, got {self.aspect}.")

    @classmethod
    def from_values(cls, area: float, height_over_width: float = 1.0) -> "Conditioning":
        return cls(area=area, aspect=(height_over_width, 1.0 / height_over_width))

    @classmethod
    def from_rect(cls, rect: CropRect, dims: ImageDims) -> "Conditioning":
        ratio = (rect.height * dims.height) / (rect.width * dims.width)
        return cls.from_values(min(max(rect.area, 1e-6), 1.0), ratio)

    def to_vector(self, mode: str) -> List[float]:
        if mode == "area":
            return [self.area]
        return [self.area, self.aspect[0], self.aspect[1]]


# -- preprocessing -----------------------------------------------------------


@dataclass(eq=False)
class PreparedInput:
    tensor: torch.Tensor
    valid: Tuple[float, float]
    subject_box: Optional[CropRect]
    dims: ImageDims


def to_square(rect: CropRect, valid: Tuple[float, float]) -> CropRect:
    """Image-normalized rect -> coordinates of the padded square input."""

    vw, vh = valid
    return CropRect.clamped(rect.x1 * vw, rect.y1 * vh, rect.x2 * vw, rect.y2 * vh)


def from_square(coords: Sequence[float], valid: Tuple[float, float]) -> CropRect:
    vw, vh = valid
    x1, y1, x2, y2 = (float(c) for c in coords)
    return CropRect.clamped(x1 / vw, y1 / vh, x2 / vw, y2 / vh)


def preprocess(
    image: np.ndarray,
    subject: Optional[SubjectRegion],
    cfg: ModelConfig,
    size: Optional[int] = None,
) -> PreparedInput:
    """Resize the longest side to ``size``, zero-pad to a square, append the mask channel.

    The content sits at the top-left corner; ``valid`` records the fraction of
    width and height it occupies. Without subject awareness the mask channel is
    all ones.
    """

    size = size or cfg.model_input_size
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    scale = size / max(h, w)
    cw, ch = max(1, int(round(w * scale))), max(1, int(round(h * scale)))

    resized = np.asarray(Image.fromarray(image).resize((cw, ch), resample=Image.BILINEAR), dtype=np.float32) / 255.0
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    tensor = torch.zeros((cfg.in_channels, size, size), dtype=torch.float32)
    tensor[:3, :ch, :cw] = torch.from_numpy(((resized - mean) / std).transpose(2, 0, 1).copy())

    valid = (cw / size, ch / size)
    subject_box = None
    if cfg.subject_aware and subject is not None:
        mask = Image.fromarray(subject.mask.astype(np.uint8) * 255).resize((cw, ch), resample=Image.NEAREST)
        tensor[3, :ch, :cw] = torch.from_numpy((np.asarray(mask) > 127).astype(np.float32))
        subject_box = to_square(subject.bbox, valid)
    else:
        tensor[3] = 1.0
    return PreparedInput(tensor=tensor, valid=valid, subject_box=subject_box, dims=ImageDims(w, h))


# -- building blocks ---------------------------------------------------------


def conv_block(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class SmallBackbone(nn.Module):
    """Four stride-2 stages; returns the three deepest feature maps."""

    widths = (16, 32, 64, 96)

    def __init__(self, in_channels: int) -> None:
        super().__init__()
        stages = []
        prev = in_channels
        for width in self.widths:
            stages.append(nn.Sequential(conv_block(prev, width, 2), conv_block(width, width)))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.out_channels = self.widths[1:]

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[1:]


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50, first conv widened to the mask channel; final three stages."""

    def __init__(self, in_channels: int, pretrained: bool) -> None:
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        conv = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        with torch.no_grad():
            conv.weight[:, :3] = net.conv1.weight
            conv.weight[:, 3:] = net.conv1.weight.mean(dim=1, keepdim=True)
        self.stem = nn.Sequential(conv, net.bn1, net.relu, net.maxpool, net.layer1)
        self.layer2, self.layer3, self.layer4 = net.layer2, net.layer3, net.layer4
        self.out_channels = (512, 1024, 2048)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        c2 = self.layer2(self.stem(x))
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [c2, c3, c4]


class FeatureFusion(nn.Module):
    """1x1 projections, bilinear resampling to the grid, sum, 1x1 + ReLU down to the fused width."""

    def __init__(self, in_channels: Sequence[int], grid: int, out_channels: int, width: int) -> None:
        super().__init__()
        self.grid = grid
        self.proj = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        self.out = nn.Sequential(nn.Conv2d(width, out_channels, 1), nn.ReLU(inplace=True))

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        total = 0
        for proj, feat in zip(self.proj, feats):
            total = total + F.interpolate(proj(feat), size=(self.grid, self.grid), mode="bilinear", align_corners=False)
        return self.out(total)


def build_backbone(cfg: ModelConfig) -> Tuple[nn.Module, FeatureFusion]:
    if cfg.backbone == "resnet50":
        backbone: nn.Module = ResNet50Backbone(cfg.in_channels, cfg.pretrained)
        width = 256
    else:
        backbone = SmallBackbone(cfg.in_channels)
        width = 64
    return backbone, FeatureFusion(backbone.out_channels, cfg.feature_grid, cfg.fused_channels, width)


def sinusoidal_2d(grid: int, channels: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, ``(grid * grid, channels)`` in row-major token order."""

    quarter = max(1, channels // 4)
    freqs = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys, xs = torch.meshgrid(torch.arange(grid, dtype=torch.float32), torch.arange(grid, dtype=torch.float32), indexing="ij")
    px = xs.reshape(-1, 1) * freqs
    py = ys.reshape(-1, 1) * freqs
    pe = torch.cat([px.sin(), px.cos(), py.sin(), py.cos()], dim=1)
    if pe.shape[1] < channels:
        pe = F.pad(pe, (0, channels - pe.shape[1]))
    return pe[:, :channels]


def anchor_centers(grid: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Cell-center coordinates per token, row-major (y outer, x inner)."""

    centers = (torch.arange(grid, dtype=torch.float32) + 0.5) / grid
    cy, cx = torch.meshgrid(centers, centers, indexing="ij")
    return cx.reshape(-1), cy.reshape(-1)


def decode_proposals(raw: torch.Tensor, cx: torch.Tensor, cy: torch.Tensor) -> torch.Tensor:
    """Squash per-anchor offsets into rects that contain the anchor center and stay in [0, 1]."""

    s = torch.sigmoid(raw)
    cx = cx.to(raw)
    cy = cy.to(raw)
    x1 = cx * (1 - s[..., 0])
    y1 = cy * (1 - s[..., 1])
    x2 = cx + (1 - cx) * s[..., 2]
    y2 = cy + (1 - cy) * s[..., 3]
    return torch.stack([x1, y1, x2, y2], dim=-1)


def anchor_mask(
    subject_box: Optional[torch.Tensor],
    valid: torch.Tensor,
    grid: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Anchors whose center lies on the subject box and inside the unpadded image.

    Returns ``(mask (B, N), fallback (B,))``; rows where the subject box covers
    no anchor fall back to the valid-region mask.
    """

    cx, cy = anchor_centers(grid)
    cx, cy = cx.to(valid.device), cy.to(valid.device)
    in_valid = (cx[None] < valid[:, :1]) & (cy[None] < valid[:, 1:2])
    fallback = torch.zeros(valid.shape[0], dtype=torch.bool, device=valid.device)
    if subject_box is None:
        return in_valid, fallback

    box = subject_box.to(valid)
    on_subject = (
        (cx[None] >= box[:, 0:1]) & (cx[None] <= box[:, 2:3]) & (cy[None] >= box[:, 1:2]) & (cy[None] <= box[:, 3:4])
    )
    mask = on_subject & in_valid
    fallback = ~mask.any(dim=1)
    if fallback.any():
        mask = torch.where(fallback[:, None], in_valid, mask)
    return mask, fallback


def blend_proposals(proposals: torch.Tensor, logits: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Softmax over unmasked logits (masked ones set to -inf), weighted sum of proposals."""

    masked = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(masked, dim=-1)
    return (weights.unsqueeze(-1) * proposals).sum(dim=-2), weights


def clamp_to_valid(rects: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(rects[..., 0])
    vw, vh = valid[..., 0].to(rects), valid[..., 1].to(rects)
    x1 = torch.minimum(torch.maximum(rects[..., 0], zero), vw)
    y1 = torch.minimum(torch.maximum(rects[..., 1], zero), vh)
    x2 = torch.minimum(torch.maximum(rects[..., 2], zero), vw)
    y2 = torch.minimum(torch.maximum(rects[..., 3], zero), vh)
    return torch.stack([x1, y1, x2, y2], dim=-1)


def _bin_matrix(grid: int, bins: int, like: torch.Tensor) -> torch.Tensor:
    """Membership of each grid cell in the adaptive-average-pooling bins."""

    matrix = torch.zeros(bins, grid, dtype=like.dtype, device=like.device)
    for p in range(bins):
        start = (p * grid) // bins
        end = -((-(p + 1) * grid) // bins)
        matrix[p, start:end] = 1.0
    return matrix


def _coverage(lo: torch.Tensor, hi: torch.Tensor, grid: int) -> torch.Tensor:
    edges = torch.arange(grid + 1, dtype=lo.dtype, device=lo.device) / grid
    left, right = edges[:-1], edges[1:]
    return (torch.minimum(hi[..., None], right) - torch.maximum(lo[..., None], left)).clamp_min(0) * grid


def outside_pool(features: torch.Tensor, boxes: torch.Tensor, bins: int) -> torch.Tensor:
    """Average-pool features outside each box into ``bins x bins`` cells.

    Each cell of the feature grid is weighted by the fraction of it left
    uncovered by the box; every pooled bin is renormalized by its uncovered
    area. ``boxes`` is ``(B, N, 4)`` in [0, 1]. Returns ``(B * N, C, bins, bins)``.
    """

    b, c, g, _ = features.shape
    n = boxes.shape[1]
    pool = _bin_matrix(g, bins, features)
    mx = _coverage(boxes[..., 0], boxes[..., 2], g)
    my = _coverage(boxes[..., 1], boxes[..., 3], g)

    total = torch.einsum("pj,bcji,qi->bcpq", pool, features, pool)
    count = torch.einsum("pj,qi->pq", pool, pool)
    partial = torch.einsum("bcji,bni,qi->bncjq", features, mx, pool)
    inside = torch.einsum("bncjq,bnj,pj->bncpq", partial, my, pool)
    inside_count = torch.einsum("bnj,pj->bnp", my, pool)[..., :, None] * torch.einsum("bni,qi->bnq", mx, pool)[..., None, :]

    outside = (total[:, None] - inside) / (count - inside_count).clamp_min(1e-6)[:, :, None]
    return outside.reshape(b * n, c, bins, bins)


class CompositionBranch(nn.Module):
    """Scores each proposal from features pooled inside and outside it."""

    def __init__(self, channels: int, bins: int, hidden: int) -> None:
        super().__init__()
        self.bins = bins
        self.reduce = nn.Sequential(nn.Conv2d(2 * channels, hidden, bins), nn.ReLU(inplace=True))
        self.head = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))

    def forward(self, features: torch.Tensor, proposals: torch.Tensor) -> torch.Tensor:
        b, n, _ = proposals.shape
        grid = features.shape[-1]
        boxes = [p * grid for p in proposals]
        inside = roi_align(features, boxes, output_size=self.bins, spatial_scale=1.0, sampling_ratio=2, aligned=True)
        outside = outside_pool(features, proposals, self.bins)
        pooled = self.reduce(torch.cat([inside, outside], dim=1)).flatten(1)
        return self.head(pooled).reshape(b, n)


# -- models ------------------------------------------------------------------


@dataclass(eq=False)
class ProposalGrid:
    """Per-anchor proposals ``(B, G, G, 4)``, raw weights ``(B, G, G)`` and the anchor mask."""

    proposals: torch.Tensor
    weights: torch.Tensor
    anchor_mask: torch.Tensor

    def masked_weights(self) -> torch.Tensor:
        return self.weights.masked_fill(~self.anchor_mask, float("-inf"))

    def softmax(self) -> torch.Tensor:
        b = self.weights.shape[0]
        return torch.softmax(self.masked_weights().reshape(b, -1), dim=-1).reshape(self.weights.shape)


@dataclass(eq=False)
class CropperOutput:
    grid: ProposalGrid
    blended: torch.Tensor
    raw_blended: torch.Tensor
    fallback: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.bool))


class SubjectAwareCropper(nn.Module):
    """Backbone -> fused grid -> encoder (or conditioned decoder) -> proposals + composition weights."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        c = cfg.fused_channels
        self.backbone, self.fusion = build_backbone(cfg)
        self.register_buffer("pos", sinusoidal_2d(cfg.feature_grid, c), persistent=False)
        cx, cy = anchor_centers(cfg.feature_grid)
        self.register_buffer("cx", cx, persistent=False)
        self.register_buffer("cy", cy, persistent=False)

        if cfg.variant == "conditional":
            layer = nn.TransformerDecoderLayer(c, cfg.encoder_heads, dim_feedforward=4 * c, dropout=0.1, batch_first=True)
            self.decoder = nn.TransformerDecoder(layer, cfg.encoder_layers)
            self.condition = nn.Sequential(
                nn.Linear(cfg.conditioning_dim, cfg.conditioning_hidden),
                nn.ReLU(inplace=True),
                nn.Dropout(cfg.conditioning_dropout),
                nn.Linear(cfg.conditioning_hidden, c),
                nn.ReLU(inplace=True),
                nn.Dropout(cfg.conditioning_dropout),
            )
        else:
            layer = nn.TransformerEncoderLayer(c, cfg.encoder_heads, dim_feedforward=4 * c, dropout=0.1, batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, cfg.encoder_layers, enable_nested_tensor=False)
        self.proposal_head = nn.Linear(c, 4)
        self.composition = CompositionBranch(c, cfg.roi_pool, cfg.composition_hidden)

    def forward(
        self,
        x: torch.Tensor,
        subject_box: Optional[torch.Tensor] = None,
        valid: Optional[torch.Tensor] = None,
        conditioning: Optional[torch.Tensor] = None,
    ) -> CropperOutput:
        b = x.shape[0]
        g = self.cfg.feature_grid
        if valid is None:
            valid = torch.ones(b, 2, dtype=x.dtype, device=x.device)

        features = self.fusion(self.backbone(x))
        tokens = features.flatten(2).transpose(1, 2) + self.pos.to(features)
        if self.cfg.variant == "conditional":
            if conditioning is None:
                raise ValueError("The conditional model needs a conditioning signal.")
            memory = self.condition(conditioning.to(tokens)).unsqueeze(1)
            encoded = self.decoder(tokens, memory)
        else:
            encoded = self.encoder(tokens)

        proposals = decode_proposals(self.proposal_head(encoded), self.cx, self.cy)
        logits = self.composition(features, proposals.detach())
        mask, fallback = anchor_mask(subject_box if self.cfg.subject_aware else None, valid, g)
        if fallback.any():
            log.warning("subject box covers no anchor for %d item(s); masking by image area only", int(fallback.sum()))
        raw_blended, _ = blend_proposals(proposals, logits, mask)
        grid = ProposalGrid(proposals.reshape(b, g, g, 4), logits.reshape(b, g, g), mask.reshape(b, g, g))
        return CropperOutput(grid=grid, blended=clamp_to_valid(raw_blended, valid), raw_blended=raw_blended, fallback=fallback)


class CropUNet(nn.Module):
    """Small U-Net predicting per-pixel crop membership logits."""

    widths = (16, 32, 64, 128)

    def __init__(self, in_channels: int = 4) -> None:
        super().__init__()
        w = self.widths
        self.down = nn.ModuleList()
        prev = in_channels
        for i, width in enumerate(w):
            self.down.append(nn.Sequential(conv_block(prev, width, 1 if i == 0 else 2), conv_block(width, width)))
            prev = width
        self.up = nn.ModuleList(
            nn.Sequential(conv_block(w[i + 1] + w[i], w[i]), conv_block(w[i], w[i])) for i in reversed(range(len(w) - 1))
        )
        self.out = nn.Conv2d(w[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for stage in self.down:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        for stage in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = stage(torch.cat([x, skip], dim=1))
        return self.out(x).squeeze(1)


class CropRanker(nn.Module):
    """Scores how much a rendered candidate crop looks like a real framing, in [0, 1]."""

    def __init__(self, in_channels: int = 4) -> None:
        super().__init__()
        widths = (16, 32, 64, 128)
        layers = []
        prev = in_channels
        for width in widths:
            layers.append(conv_block(prev, width, 2))
            prev = width
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(prev, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.features(x))).squeeze(-1)


def build_model(cfg: ModelConfig) -> nn.Module:
    if cfg.variant in ("base", "conditional"):
        return SubjectAwareCropper(cfg)
    if cfg.variant == "unet":
        return CropUNet(cfg.in_channels)
    return CropRanker(cfg.in_channels)


# -- variant inference -------------------------------------------------------


def extract_crop_from_scores(
    scores: np.ndarray,
    threshold: float = 0.5,
    valid: Tuple[float, float] = (1.0, 1.0),
) -> Tuple[CropRect, bool]:
    """Bounding box of the largest 4-connected component above ``threshold``.

    Returns ``(crop, warning)``; an empty mask yields the full frame with the
    warning set.
    """

    h, w = scores.shape
    vw, vh = max(1, int(round(valid[0] * w))), max(1, int(round(valid[1] * h)))
    binary = np.asarray(scores)[:vh, :vw] > threshold
    labels, count = ndimage.label(binary)
    if count == 0:
        log.warning("crop mask is empty after thresholding at %.2f; using the full frame", threshold)
        return CropRect.full(), True

    sizes = ndimage.sum_labels(binary, labels, index=np.arange(1, count + 1))
    largest = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == largest)
    return CropRect.from_pixels((xs.min(), ys.min(), xs.max() + 1, ys.max() + 1), ImageDims(vw, vh)), False


@torch.no_grad()
def unet_forward_and_extract(model: CropUNet, prepared: PreparedInput, threshold: float = 0.5) -> Tuple[CropRect, bool]:
    model.eval()
    scores = torch.sigmoid(model(prepared.tensor.unsqueeze(0)))[0].cpu().numpy()
    return extract_crop_from_scores(scores, threshold, prepared.valid)


def candidate_grid(min_side: float = 0.55, steps: int = 6, positions: int = 3, min_area: float = 0.3) -> List[CropRect]:
    """Crop candidates over a grid of sizes and anchor positions (full frame included)."""

    sides = np.linspace(min_side, 1.0, steps)
    candidates = {}
    for sw in sides:
        for sh in sides:
            if sw * sh < min_area - 1e-9:
                continue
            for ox in np.linspace(0.0, 1.0 - sw, positions if sw < 1 else 1):
                for oy in np.linspace(0.0, 1.0 - sh, positions if sh < 1 else 1):
                    rect = CropRect.clamped(ox, oy, ox + sw, oy + sh)
                    candidates[tuple(round(v, 6) for v in rect.as_tuple())] = rect
    return list(candidates.values())


def render_candidate(image: np.ndarray, subject: Optional[SubjectRegion], rect: CropRect, cfg: ModelConfig) -> torch.Tensor:
    """Crop image and subject mask to ``rect`` and preprocess the result."""

    x1, y1, x2, y2 = rect.to_pixel_box(ImageDims.of(image))
    crop = np.asarray(image)[y1:y2, x1:x2]
    sub = None
    if subject is not None:
        mask = subject.mask[y1:y2, x1:x2]
        if mask.any():
            sub = SubjectRegion.from_mask(mask)
    if sub is None and cfg.subject_aware:
        prepared = preprocess(crop, None, cfg)
        prepared.tensor[3] = 0.0
        return prepared.tensor
    return preprocess(crop, sub, cfg).tensor


@torch.no_grad()
def ranking_score(model: CropRanker, rendered: torch.Tensor) -> torch.Tensor:
    model.eval()
    batch = rendered if rendered.dim() == 4 else rendered.unsqueeze(0)
    return model(batch)


@torch.no_grad()
def rank_candidates(
    model: CropRanker,
    cfg: ModelConfig,
    image: np.ndarray,
    subject: Optional[SubjectRegion],
    candidates: Optional[Sequence[CropRect]] = None,
    batch_size: int = 32,
) -> List[Tuple[CropRect, float]]:
    """Candidates paired with their scores, best first."""

    candidates = list(candidates or candidate_grid())
    scores: List[float] = []
    for start in range(0, len(candidates), batch_size):
        chunk = candidates[start : start + batch_size]
        batch = torch.stack([render_candidate(image, subject, rect, cfg) for rect in chunk])
        scores.extend(float(s) for s in ranking_score(model, batch))
    order = np.argsort(-np.asarray(scores), kind="stable")
    return [(candidates[i], scores[i]) for i in order]


# -- checkpoints and prediction ----------------------------------------------


def save_checkpoint(path: str | Path, model: nn.Module, cfg: ModelConfig, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "model_config": asdict(cfg),
            "dataset_stats": {"mean": list(cfg.mean), "std": list(cfg.std)},
            "state_dict": model.state_dict(),
            "meta": meta or {},
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> Tuple[nn.Module, ModelConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise UserInputError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu")
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise UserInputError(f"Checkpoint {path} has version {version}; expected {CHECKPOINT_VERSION}.")
    raw = dict(payload["model_config"])
    raw["mean"] = tuple(raw["mean"])
    raw["std"] = tuple(raw["std"])
    cfg = ModelConfig(**{**raw, "pretrained": False})
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload.get("meta", {})


@dataclass
class Prediction:
    crop: CropRect
    warning: bool = False


class CropPredictor:
    """Inference front-end shared by every variant."""

    def __init__(self, model: nn.Module, cfg: ModelConfig) -> None:
        self.model = model.eval()
        self.cfg = cfg

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "CropPredictor":
        model, cfg, _meta = load_checkpoint(path)
        return cls(model, cfg)

    @property
    def is_conditional(self) -> bool:
        return self.cfg.variant == "conditional"

    @torch.no_grad()
    def predict(
        self,
        image: np.ndarray,
        subject: Optional[SubjectRegion] = None,
        conditioning: Optional[Conditioning] = None,
    ) -> Prediction:
        cfg = self.cfg
        if cfg.variant == "ranking":
            best, _score = rank_candidates(self.model, cfg, image, subject)[0]
            return Prediction(best)

        prepared = preprocess(image, subject, cfg)
        if cfg.variant == "unet":
            crop, warned = unet_forward_and_extract(self.model, prepared)
            return Prediction(crop, warned)

        cond = None
        if cfg.variant == "conditional":
            conditioning = conditioning or Conditioning.from_values(1.0)
            cond = torch.tensor([conditioning.to_vector(cfg.conditioning)], dtype=torch.float32)
        box = None
        if prepared.subject_box is not None:
            box = torch.tensor([prepared.subject_box.as_tuple()], dtype=torch.float32)
        valid = torch.tensor([prepared.valid], dtype=torch.float32)
        out = self.model(prepared.tensor.unsqueeze(0), box, valid, cond)
        return Prediction(from_square(out.blended[0].tolist(), prepared.valid), bool(out.fallback[0]))


def require_subject_for(cfg: ModelConfig, subject: Optional[SubjectRegion]) -> None:
    if cfg.subject_aware and subject is None and cfg.variant in ("base", "conditional"):
        raise UserInputError(
            "No subject was detected and this model is subject-aware; pass --subject-bbox x1,y1,x2,y2."
        )


def subject_from_bbox(bbox: CropRect, dims: ImageDims) -> SubjectRegion:
    """Rectangular subject region for a user-supplied box."""

    mask = np.zeros((dims.height, dims.width), dtype=bool)
    x1, y1, x2, y2 = bbox.to_pixel_box(dims)
    mask[y1:y2, x1:x2] = True
    return SubjectRegion.from_mask(mask)


def parameter_count(model: nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters()))


def describe(cfg: ModelConfig) -> str:
    return f"{cfg.variant} cropper ({cfg.backbone} backbone, {cfg.anchors} anchors, subject_aware={cfg.subject_aware})"
