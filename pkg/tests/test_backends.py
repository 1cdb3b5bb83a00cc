from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
import requests

from config.assumptions import NEGATIVE_PROMPT
from core.backends import (
    HttpDetector,
    HttpOutpainter,
    MockCaptioner,
    MockDetector,
    MockOutpainter,
    OpenAICaptioner,
    OutpaintRequest,
    build_backends,
    decode_png,
    encode_png,
    outpaint_payload,
    request_from_payload,
    safe_caption,
)
from core.geometry import CropRect, iou
from core.scenegen import SceneSpec, SubjectShape, generate_scene
from utils.errors import BackendResponseError, BackendUnavailableError, describe_backend_error


def _request(seed: int = 0, size: int = 96) -> OutpaintRequest:
    image = np.zeros((size, size, 3), dtype=np.uint8)
    valid = np.zeros((size, size), dtype=bool)
    image[24:72, 30:70] = np.random.default_rng(seed).integers(0, 255, size=(48, 40, 3), dtype=np.uint8)
    valid[24:72, 30:70] = True
    return OutpaintRequest(image=image, valid_mask=valid, prompt="a photo", seed=seed)


class _Response:
    def __init__(self, status: int, body=None) -> None:
        self.status_code = status
        self._body = body

    def json(self):
        if self._body is None:
            raise ValueError("no json")
        return self._body


def test_request_validation():
    image = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        OutpaintRequest(image=image, valid_mask=np.ones((8, 8), bool), prompt="")
    with pytest.raises(ValueError):
        OutpaintRequest(image=image, valid_mask=np.zeros((8, 8), bool), prompt="")
    with pytest.raises(ValueError):
        OutpaintRequest(image=image, valid_mask=np.ones((4, 4), bool), prompt="")
    assert OutpaintRequest(image=image, valid_mask=np.ones((8, 8), bool), prompt="", allow_full_mask=True)
    assert _request().negative_prompt == NEGATIVE_PROMPT


def test_mock_outpainter_keeps_pasted_pixels_and_is_deterministic():
    req = _request(seed=4)
    out = MockOutpainter().outpaint(req)
    assert out.shape == req.image.shape
    assert np.array_equal(out[req.valid_mask], req.image[req.valid_mask])
    assert np.array_equal(out, MockOutpainter().outpaint(_request(seed=4)))
    assert out[~req.valid_mask].any()


def test_mock_outpainter_full_mask_is_identity():
    image = np.random.default_rng(0).integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
    req = OutpaintRequest(image=image, valid_mask=np.ones((16, 16), bool), prompt="", allow_full_mask=True)
    assert np.array_equal(MockOutpainter().outpaint(req), image)


def test_mock_outpainter_failure_modes():
    outpainter = MockOutpainter(failure_rate=1.0)
    modes = {outpainter.failure_mode(seed) for seed in range(40)}
    assert modes == {"tiled", "bordered"}
    assert MockOutpainter(failure_rate=0.0).failure_mode(3) is None
    req = _request(seed=1)
    out = outpainter.outpaint(req)
    assert np.array_equal(out[req.valid_mask], req.image[req.valid_mask])
    with pytest.raises(ValueError):
        MockOutpainter(failure_rate=1.5)


def test_mock_detector_finds_scene_subject(scene):
    detections = MockDetector().detect_subjects(scene.image)
    assert len(detections) == 1
    found = detections[0].bbox
    h, w = scene.image.shape[:2]
    for a, b, size in zip(found.as_tuple(), scene.subject.bbox.as_tuple(), (w, h, w, h)):
        assert abs(a - b) * size <= 2


def test_mock_detector_blank_and_sorting():
    assert MockDetector().detect_subjects(np.full((32, 32, 3), 128, dtype=np.uint8)) == []
    image = np.full((64, 64, 3), 128, dtype=np.uint8)
    image[2:10, 2:10] = (210, 40, 40)
    image[30:60, 30:60] = (40, 70, 210)
    detections = MockDetector().detect_subjects(image)
    assert [round(d.area, 4) for d in detections] == [round(900 / 4096, 4), round(64 / 4096, 4)]


@pytest.mark.parametrize("shape", list(SubjectShape))
def test_mock_captioner_rebuilds_scene_caption(shape):
    scene = generate_scene(SceneSpec(seed=1, subject_shape=shape, subject_color="red"))
    assert MockCaptioner().caption(scene.image) == scene.caption


def test_safe_caption_falls_back_on_failure():
    class Down:
        def caption(self, image):
            raise requests.ConnectionError("refused")

    assert safe_caption(Down(), np.zeros((4, 4, 3), np.uint8)) == ("", True)
    assert MockCaptioner().caption(np.full((16, 16, 3), 128, np.uint8)) == "a photo"


def test_payload_round_trip_is_bit_exact():
    req = _request(seed=9)
    back = request_from_payload(outpaint_payload(req))
    assert np.array_equal(back.image, req.image)
    assert np.array_equal(back.valid_mask, req.valid_mask)
    assert (back.prompt, back.negative_prompt, back.guidance_scale, back.steps, back.seed) == (
        req.prompt,
        req.negative_prompt,
        req.guidance_scale,
        req.steps,
        req.seed,
    )


def test_decode_png_rejects_garbage():
    with pytest.raises(BackendResponseError):
        decode_png("not base64 at all!")


def test_http_outpainter_status_handling(monkeypatch):
    req = _request()
    service = HttpOutpainter("http://outpaint.invalid", timeout=1.0, max_inflight=1)

    monkeypatch.setattr(service._session, "post", lambda *a, **k: _Response(503))
    with pytest.raises(BackendUnavailableError):
        service.outpaint(req)

    monkeypatch.setattr(service._session, "post", lambda *a, **k: _Response(422))
    with pytest.raises(BackendResponseError):
        service.outpaint(req)

    monkeypatch.setattr(service._session, "post", lambda *a, **k: _Response(200, {"other": 1}))
    with pytest.raises(BackendResponseError):
        service.outpaint(req)

    def refuse(*a, **k):
        raise requests.ConnectionError("connection refused")

    monkeypatch.setattr(service._session, "post", refuse)
    with pytest.raises(BackendUnavailableError):
        service.outpaint(req)

    filled = np.full_like(req.image, 77)
    monkeypatch.setattr(service._session, "post", lambda *a, **k: _Response(200, {"image_b64": encode_png(filled)}))
    assert np.array_equal(service.outpaint(req), filled)


def test_http_detector_filters_by_score_and_label(monkeypatch):
    image = np.zeros((32, 32, 3), dtype=np.uint8)
    big = np.zeros((32, 32), dtype=np.uint8)
    big[4:20, 4:20] = 255
    small = np.zeros((32, 32), dtype=np.uint8)
    small[24:28, 24:28] = 255
    body = {
        "detections": [
            {"label": "person", "score": 0.9, "mask_b64": encode_png(small)},
            {"label": "person", "score": 0.95, "mask_b64": encode_png(big)},
            {"label": "person", "score": 0.2, "mask_b64": encode_png(big)},
            {"label": "dog", "score": 0.99, "mask_b64": encode_png(big)},
        ]
    }
    detector = HttpDetector("http://detect.invalid", timeout=1.0, max_inflight=1)
    monkeypatch.setattr(detector._session, "post", lambda *a, **k: _Response(200, body))
    found = detector.detect_subjects(image, "person")
    assert len(found) == 2
    assert iou(found[0].bbox, CropRect(4 / 32, 4 / 32, 20 / 32, 20 / 32)) == pytest.approx(1.0)


def test_openai_captioner_passes_text_through():
    message = SimpleNamespace(content="A red ellipse on grey.")
    response = SimpleNamespace(choices=[SimpleNamespace(message=message)])
    calls = []

    def create(**kwargs):
        calls.append(kwargs)
        return response

    client = SimpleNamespace(chat=SimpleNamespace(completions=SimpleNamespace(create=create)))
    captioner = OpenAICaptioner("gpt-test", client=client)
    assert captioner.caption(np.zeros((8, 8, 3), np.uint8)) == "A red ellipse on grey."
    assert calls[0]["model"] == "gpt-test"

    message.content = ""
    with pytest.raises(BackendResponseError):
        captioner.caption(np.zeros((8, 8, 3), np.uint8))


def test_build_backends_validation():
    assert isinstance(build_backends("mock").outpainter, MockOutpainter)
    with pytest.raises(ValueError):
        build_backends("http")
    with pytest.raises(ValueError):
        build_backends("diffusers")
    remote = build_backends("http", outpaint_url="http://x.invalid")
    assert isinstance(remote.outpainter, HttpOutpainter)
    assert isinstance(remote.detector, MockDetector)


def test_describe_backend_error_messages():
    assert "Network issue" in describe_backend_error(requests.ConnectionError("boom"))
    assert "did not answer in time" in describe_backend_error(RuntimeError("read timed out"))
    assert describe_backend_error(RuntimeError("plain")) == "plain"
