"""Outpainter, captioner and subject-detector backends.

Each concern has a small protocol, a deterministic mock used at desk scale,
and an adapter for an external service. The mocks understand scenegen scenes:
the detector recovers palette-colored shapes and the captioner rebuilds the
scene caption from what the detector sees.
"""

from __future__ import annotations

import base64
import io
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Tuple

import numpy as np
import requests
from PIL import Image, ImageDraw
from requests.adapters import HTTPAdapter
from scipy import ndimage
from urllib3.util.retry import Retry

from config.assumptions import (
    DEFAULT_SUBJECT_CLASS,
    DETECTION_SCORE_THRESHOLD,
    DENOISING_STEPS,
    FALLBACK_CAPTION,
    GUIDANCE_SCALE,
    NEGATIVE_PROMPT,
)
from core.geometry import CropRect, SubjectRegion
from core.scenegen import PALETTE, SubjectShape, caption_for
from utils.errors import BackendResponseError, BackendUnavailableError, describe_backend_error
from utils.log import get_logger

log = get_logger(__name__)

COLOR_TOLERANCE = 45
MIN_DETECTION_PIXELS = 24
MIRROR_FALLOFF_PX = 6.0


@dataclass(eq=False)
class OutpaintRequest:
    image: np.ndarray
    valid_mask: np.ndarray
    prompt: str
    negative_prompt: str = NEGATIVE_PROMPT
    guidance_scale: float = GUIDANCE_SCALE
    steps: int = DENOISING_STEPS
    seed: int = 0
    allow_full_mask: bool = field(default=False, repr=False)

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.valid_mask.shape[:2]:
            raise ValueError(
                f"Image {self.image.shape[:2]} and mask {self.valid_mask.shape[:2]} must share dimensions."
            )
        valid = self.valid_mask.astype(bool)
        if valid.all() and not self.allow_full_mask:
            raise ValueError("Outpaint mask keeps every pixel; there is nothing to synthesize.")
        if not valid.any():
            raise ValueError("Outpaint mask keeps no pixel.")
        if self.steps <= 0 or self.guidance_scale <= 0:
            raise ValueError("Steps and guidance scale must be positive.")


@dataclass(eq=False)
class Detection:
    class_label: str
    score: float
    region: SubjectRegion

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Detection score must be in [0, 1], got {self.score}.")

    @property
    def bbox(self) -> CropRect:
        return self.region.bbox

    @property
    def area(self) -> float:
        return self.region.bbox.area


class Outpainter(Protocol):
    def outpaint(self, req: OutpaintRequest) -> np.ndarray: ...


class Captioner(Protocol):
    def caption(self, image: np.ndarray) -> str: ...


class SubjectDetector(Protocol):
    def detect_subjects(self, image: np.ndarray, class_label: str) -> List[Detection]: ...


@dataclass
class Backends:
    outpainter: Outpainter
    captioner: Captioner
    detector: SubjectDetector


def sort_detections(detections: List[Detection]) -> List[Detection]:
    return sorted(detections, key=lambda d: d.area, reverse=True)


# -- mocks -------------------------------------------------------------------


def _value_noise(shape: Tuple[int, int], rng: np.random.Generator, cells: int = 6) -> np.ndarray:
    grid = rng.uniform(0, 255, size=(cells, cells)).astype(np.uint8)
    smooth = Image.fromarray(grid).resize((shape[1], shape[0]), resample=Image.BILINEAR)
    return np.asarray(smooth, dtype=np.float32) / 255.0 - 0.5


def _valid_box(valid: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(valid)
    return int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1


class MockOutpainter:
    """Mirror padding blended into seeded value noise, then lightly blurred.

    The mirrored content fades out within a few pixels of the seam so that the
    synthesized area continues the background without duplicating the subject.
    ``failure_rate`` plants tiled or bordered canvases, the two failure modes
    the quality classifier is trained to catch.
    """

    def __init__(self, failure_rate: float = 0.0, blur_sigma: float = 1.0) -> None:
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError("failure_rate must be in [0, 1].")
        self.failure_rate = failure_rate
        self.blur_sigma = blur_sigma

    def failure_mode(self, seed: int) -> Optional[str]:
        rng = np.random.default_rng([seed, 7])
        if rng.random() >= self.failure_rate:
            return None
        return "tiled" if rng.random() < 0.5 else "bordered"

    def outpaint(self, req: OutpaintRequest) -> np.ndarray:
        valid = req.valid_mask.astype(bool)
        image = np.asarray(req.image, dtype=np.uint8)
        if valid.all():
            return image.copy()

        rng = np.random.default_rng(req.seed)
        out = self._extend(image, valid, rng)

        mode = self.failure_mode(req.seed)
        if mode == "tiled":
            out = tile_canvas(image, valid)
        elif mode == "bordered":
            out = draw_border(out, valid, rng)

        out[valid] = image[valid]
        return out

    def _extend(self, image: np.ndarray, valid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        y1, y2, x1, x2 = _valid_box(valid)
        h, w = valid.shape
        region = image[y1:y2, x1:x2].astype(np.float32)
        mirrored = np.pad(region, ((y1, h - y2), (x1, w - x2), (0, 0)), mode="symmetric")

        border = np.concatenate([region[0], region[-1], region[:, 0], region[:, -1]], axis=0)
        mean = border.mean(axis=0)
        spread = float(border.std()) + 8.0
        noise = mean[None, None, :] + _value_noise((h, w), rng)[..., None] * 2.0 * spread
        noise += rng.normal(0.0, 2.0, size=(h, w, 1))

        distance = ndimage.distance_transform_edt(~valid)
        weight = np.exp(-distance / MIRROR_FALLOFF_PX)[..., None]
        out = weight * mirrored + (1.0 - weight) * noise
        out = ndimage.gaussian_filter(out, sigma=(self.blur_sigma, self.blur_sigma, 0))
        return np.clip(out, 0, 255).astype(np.uint8)


def tile_canvas(image: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """2x2 tiling of the pasted content across the canvas."""

    y1, y2, x1, x2 = _valid_box(valid)
    h, w = valid.shape
    tile = Image.fromarray(image[y1:y2, x1:x2]).resize((max(1, w // 2), max(1, h // 2)), resample=Image.BILINEAR)
    canvas = Image.new("RGB", (w, h))
    for ty in (0, h // 2):
        for tx in (0, w // 2):
            canvas.paste(tile, (tx, ty))
    return np.asarray(canvas, dtype=np.uint8).copy()


def draw_border(image: np.ndarray, valid: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Solid picture-frame border around the canvas edge and around the pasted region."""

    h, w = valid.shape
    canvas = Image.fromarray(image)
    draw = ImageDraw.Draw(canvas)
    shade = int(rng.integers(0, 2)) * 235 + int(rng.integers(0, 20))
    color = (shade, shade, shade)
    thickness = max(4, int(min(h, w) * rng.uniform(0.03, 0.06)))
    for i in range(thickness):
        draw.rectangle([i, i, w - 1 - i, h - 1 - i], outline=color)
    y1, y2, x1, x2 = _valid_box(valid)
    for i in range(1, 4):
        draw.rectangle([x1 - i, y1 - i, x2 - 1 + i, y2 - 1 + i], outline=color)
    return np.asarray(canvas, dtype=np.uint8).copy()


def classify_shape(mask: np.ndarray) -> SubjectShape:
    """Guess the scenegen shape from how much of its bounding box it fills."""

    ys, xs = np.nonzero(mask)
    box_area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    fill = len(xs) / box_area
    if fill > 0.9:
        return SubjectShape.ROUNDED_RECT
    if fill > 0.72:
        return SubjectShape.ELLIPSE
    return SubjectShape.SILHOUETTE


class MockDetector:
    """Palette color matching plus connected components; every hit scores 1.0."""

    def __init__(self, tolerance: int = COLOR_TOLERANCE, min_pixels: int = MIN_DETECTION_PIXELS) -> None:
        self.tolerance = tolerance
        self.min_pixels = min_pixels

    def components(self, image: np.ndarray) -> List[Tuple[str, np.ndarray]]:
        pixels = np.asarray(image, dtype=np.int16)
        found = []
        for name, rgb in PALETTE.items():
            close = np.abs(pixels - np.array(rgb, dtype=np.int16)).max(axis=-1) <= self.tolerance
            if not close.any():
                continue
            labels, count = ndimage.label(close)
            if count == 0:
                continue
            sizes = ndimage.sum_labels(close, labels, index=np.arange(1, count + 1))
            for idx, size in enumerate(sizes, start=1):
                if size >= self.min_pixels:
                    found.append((name, labels == idx))
        return found

    def detect_subjects(self, image: np.ndarray, class_label: str = DEFAULT_SUBJECT_CLASS) -> List[Detection]:
        detections = [
            Detection(class_label=class_label, score=1.0, region=SubjectRegion.from_mask(mask))
            for _color, mask in self.components(image)
        ]
        return sort_detections(detections)


class MockCaptioner:
    """Rebuilds the scenegen caption of the largest detected shape."""

    def __init__(self, detector: Optional[MockDetector] = None, fallback: str = FALLBACK_CAPTION) -> None:
        self.detector = detector or MockDetector()
        self.fallback = fallback

    def caption(self, image: np.ndarray) -> str:
        components = self.detector.components(image)
        if not components:
            return self.fallback
        color, mask = max(components, key=lambda item: int(item[1].sum()))
        return caption_for(color, classify_shape(mask))


def safe_caption(captioner: Captioner, image: np.ndarray) -> Tuple[str, bool]:
    """Caption ``image``; on backend failure return an empty prompt and a warning flag."""

    try:
        text = captioner.caption(image)
    except Exception as exc:  # noqa: BLE001 - captioning is optional for outpainting
        log.warning("captioner failed, outpainting without a prompt: %s", describe_backend_error(exc))
        return "", True
    return text, False


# -- external services -------------------------------------------------------


def encode_png(array: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png(payload: str, mode: str = "RGB") -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert(mode), dtype=np.uint8).copy()
    except (ValueError, OSError) as exc:
        raise BackendResponseError(f"Backend returned an undecodable image: {exc}") from exc


def outpaint_payload(req: OutpaintRequest) -> Dict[str, Any]:
    mask = req.valid_mask.astype(bool).astype(np.uint8) * 255
    return {
        "image_b64": encode_png(req.image),
        "mask_b64": encode_png(mask),
        "prompt": req.prompt,
        "negative_prompt": req.negative_prompt,
        "guidance_scale": float(req.guidance_scale),
        "steps": int(req.steps),
        "seed": int(req.seed),
    }


def request_from_payload(payload: Dict[str, Any]) -> OutpaintRequest:
    return OutpaintRequest(
        image=decode_png(payload["image_b64"]),
        valid_mask=decode_png(payload["mask_b64"], mode="L") > 127,
        prompt=payload["prompt"],
        negative_prompt=payload["negative_prompt"],
        guidance_scale=payload["guidance_scale"],
        steps=payload["steps"],
        seed=payload["seed"],
    )


class _JsonService:
    """Shared HTTP plumbing: pooled session, retries and an in-flight limit."""

    def __init__(self, url: str, timeout: float, max_inflight: int, retries: int = 2) -> None:
        if not url:
            raise ValueError("A service URL is required for the HTTP backend.")
        self.url = url
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max(1, max_inflight))
        self._session = requests.Session()
        retry = Retry(total=retries, backoff_factor=0.5, status_forcelist=(502, 503, 504), allowed_methods=None)
        adapter = HTTPAdapter(max_retries=retry, pool_maxsize=max(1, max_inflight))
        self._session.mount("http://", adapter)
        self._session.mount("https://", adapter)

    def post(self, payload: Dict[str, Any]) -> Any:
        with self._slots:
            try:
                response = self._session.post(self.url, json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                raise BackendUnavailableError(describe_backend_error(exc)) from exc
        if response.status_code >= 500:
            raise BackendUnavailableError(f"{self.url} answered HTTP {response.status_code}.")
        if response.status_code >= 400:
            raise BackendResponseError(f"{self.url} rejected the request: HTTP {response.status_code}.")
        try:
            return response.json()
        except ValueError as exc:
            raise BackendResponseError(f"{self.url} returned a non-JSON body.") from exc


class HttpOutpainter(_JsonService):
    """JSON-over-HTTP diffusion outpainting service."""

    def outpaint(self, req: OutpaintRequest) -> np.ndarray:
        body = self.post(outpaint_payload(req))
        if not isinstance(body, dict) or "image_b64" not in body:
            raise BackendResponseError("Outpainting response is missing 'image_b64'.")
        result = decode_png(body["image_b64"])
        if result.shape[:2] != req.image.shape[:2]:
            raise BackendResponseError(
                f"Outpainting response has shape {result.shape[:2]}, expected {req.image.shape[:2]}."
            )
        return result


class HttpDetector(_JsonService):
    """Detector/segmenter service returning ``{"detections": [{label, score, mask_b64}]}``."""

    def __init__(self, url: str, timeout: float, max_inflight: int, threshold: float = DETECTION_SCORE_THRESHOLD) -> None:
        super().__init__(url, timeout, max_inflight)
        self.threshold = threshold

    def detect_subjects(self, image: np.ndarray, class_label: str = DEFAULT_SUBJECT_CLASS) -> List[Detection]:
        body = self.post({"image_b64": encode_png(image), "class_label": class_label})
        try:
            items = body["detections"]
        except (KeyError, TypeError) as exc:
            raise BackendResponseError("Detection response is missing 'detections'.") from exc
        detections = []
        for item in items:
            score = float(item.get("score", 0.0))
            if score < self.threshold or item.get("label", class_label) != class_label:
                continue
            mask = decode_png(item["mask_b64"], mode="L") > 127
            if mask.shape != image.shape[:2] or not mask.any():
                continue
            detections.append(Detection(class_label=class_label, score=score, region=SubjectRegion.from_mask(mask)))
        return sort_detections(detections)


class OpenAICaptioner:
    """Captions an image with a vision-capable chat model; text is passed through unmodified."""

    prompt = "Describe this photo in one short sentence suitable as an image-generation prompt."

    def __init__(self, model: str, client: Any = None, timeout: float = 60.0) -> None:
        if client is None:
            from openai import OpenAI

            client = OpenAI(timeout=timeout)
        self.client = client
        self.model = model

    def caption(self, image: np.ndarray) -> str:
        data_url = "data:image/png;base64," + encode_png(image)
        response = self.client.chat.completions.create(
            model=self.model,
            messages=[
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": self.prompt},
                        {"type": "image_url", "image_url": {"url": data_url}},
                    ],
                }
            ],
            max_tokens=60,
        )
        text = response.choices[0].message.content
        if not text:
            raise BackendResponseError("Captioning response was empty.")
        return text


def build_backends(
    kind: str,
    *,
    outpaint_url: Optional[str] = None,
    detect_url: Optional[str] = None,
    openai_model: Optional[str] = None,
    use_openai: bool = False,
    timeout: float = 120.0,
    max_inflight: int = 4,
    failure_rate: float = 0.0,
) -> Backends:
    """Assemble backends for ``kind`` in {"mock", "http"}.

    The HTTP flavour needs an outpainting URL; detection falls back to the mock
    when no detection URL is configured, captioning uses OpenAI when enabled.
    """

    detector: SubjectDetector = MockDetector()
    captioner: Captioner = MockCaptioner()
    if kind == "mock":
        return Backends(MockOutpainter(failure_rate=failure_rate), captioner, detector)
    if kind != "http":
        raise ValueError(f"Unknown backend '{kind}'; expected 'mock' or 'http'.")

    if not outpaint_url:
        raise ValueError("The http backend needs an outpainting URL (set OUTCROP_OUTPAINT_URL).")
    if detect_url:
        detector = HttpDetector(detect_url, timeout, max_inflight)
    if use_openai and openai_model:
        captioner = OpenAICaptioner(openai_model, timeout=timeout)
    return Backends(HttpOutpainter(outpaint_url, timeout, max_inflight), captioner, detector)
