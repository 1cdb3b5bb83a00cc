from __future__ import annotations

import numpy as np
import pytest

from core.backends import Backends, Detection, MockCaptioner, MockDetector, MockOutpainter, build_backends
from core.datagen import (
    FLAG_EXTRA_SUBJECT,
    FLAG_KEPT,
    DatagenConfig,
    DatasetRecord,
    compose_canvas,
    discover_sources,
    load_records,
    match_subject,
    prefilter_source,
    record_seed,
    run_generation,
    sample_canvas_placement,
)
from core.geometry import CropRect, ImageDims, SubjectRegion
from utils.data_loader import load_image, read_jsonl
from utils.errors import BackendResponseError


def _detection(x1, y1, x2, y2, size=100) -> Detection:
    mask = np.zeros((size, size), dtype=bool)
    mask[y1:y2, x1:x2] = True
    return Detection(class_label="subject", score=1.0, region=SubjectRegion.from_mask(mask))


def test_prefilter_rules():
    cfg = DatagenConfig()
    image = np.zeros((100, 100, 3), dtype=np.uint8)
    assert prefilter_source(image, [], cfg).reason == "no_subject"
    six = [_detection(i * 15, 0, i * 15 + 10, 20) for i in range(6)]
    assert prefilter_source(image, six, cfg).reason == "too_many"
    assert prefilter_source(image, [_detection(10, 10, 40, 15)], cfg).reason == "too_small"
    assert prefilter_source(image, [_detection(0, 0, 95, 95)], cfg).reason == "too_large"

    big, small = _detection(0, 0, 60, 50), _detection(70, 70, 90, 90)
    verdict = prefilter_source(image, [small, big], cfg)
    assert verdict.keep and verdict.dominant is big


def test_prefilter_other_class_hook():
    cfg = DatagenConfig(discard_larger_other_class=True)
    image = np.zeros((100, 100, 3), dtype=np.uint8)
    subject, other = _detection(10, 10, 40, 50), _detection(50, 10, 99, 90)
    assert prefilter_source(image, [subject], cfg, other_detections=[other]).reason == "larger_other_class"
    assert prefilter_source(image, [subject], DatagenConfig(), other_detections=[other]).keep


def test_placement_square_source():
    rng = np.random.default_rng(0)
    placement = sample_canvas_placement(ImageDims(100, 100), rng, 512, (0.25, 0.25))
    assert (placement.width, placement.height) == (256, 256)
    assert 0 <= placement.offset_x <= 256 and 0 <= placement.offset_y <= 256
    assert not placement.fallback


def test_placement_fallback_for_elongated_source():
    rng = np.random.default_rng(1)
    placement = sample_canvas_placement(ImageDims(100, 400), rng, 512, (0.5, 0.5))
    assert placement.fallback
    assert max(placement.width, placement.height) == 512


def test_placement_area_fraction_statistics():
    rng = np.random.default_rng(2)
    draws = [sample_canvas_placement(ImageDims(300, 200), rng).area_fraction for _ in range(10_000)]
    assert np.mean(draws) == pytest.approx(0.30, abs=0.01)
    assert 0.1 <= min(draws) and max(draws) <= 0.5


def test_compose_canvas_keeps_only_the_pasted_region():
    source = np.full((40, 60, 3), 200, dtype=np.uint8)
    placement = sample_canvas_placement(ImageDims(60, 40), np.random.default_rng(3), 128)
    canvas, valid = compose_canvas(source, placement, 128)
    assert valid.sum() == placement.width * placement.height
    assert canvas[~valid].max() == 0
    rect = placement.rect(128)
    assert rect.area == pytest.approx(placement.width * placement.height / 128**2)


def test_record_seed_is_stable_and_per_repeat():
    assert record_seed(0, "scene-00001", 0) == record_seed(0, "scene-00001", 0)
    assert record_seed(0, "scene-00001", 0) != record_seed(0, "scene-00001", 1)
    assert record_seed(0, "scene-00001", 0) != record_seed(1, "scene-00001", 0)


def test_match_subject_requires_overlap():
    label = CropRect(0.5, 0.5, 1.0, 1.0)
    expected = CropRect(0.6, 0.6, 0.8, 0.8)
    outside = _detection(0, 0, 20, 20)
    assert match_subject([outside], expected, label) is None
    inside = _detection(61, 61, 79, 79)
    assert match_subject([outside, inside], expected, label) is inside


def test_generated_records(manifest, datagen_cfg):
    records = load_records(manifest)
    assert len(records) <= 6 * datagen_cfg.amplify
    assert len({r.id for r in records}) == len(records)
    canvas = ImageDims(datagen_cfg.canvas_size, datagen_cfg.canvas_size)
    for record in records:
        assert record.kept
        assert record.subject_bbox.intersects(record.pseudo_label)
        image = record.load_image(manifest.parent)
        assert image.shape == (canvas.height, canvas.width, 3)
        p = record.placement
        assert record.pseudo_label.to_pixels(canvas) == pytest.approx(
            (p["offset_x"], p["offset_y"], p["offset_x"] + p["width"], p["offset_y"] + p["height"])
        )
        if not p["fallback"]:
            slack = 2 * (p["width"] + p["height"]) / canvas.area + 1e-3
            assert record.pseudo_label.area == pytest.approx(p["area_fraction"], abs=slack)
        assert not record.outpainted_path.startswith("/")


def test_generation_resumes_without_rewriting(manifest, corpus, datagen_cfg):
    before = read_jsonl(manifest)
    stats = run_generation(discover_sources(corpus["sources"]), build_backends("mock"), datagen_cfg, manifest, quiet=True)
    assert stats.written == 0
    assert stats.skipped_existing == len(before)
    assert read_jsonl(manifest) == before


def test_generation_is_deterministic(tmp_path, manifest, corpus, datagen_cfg):
    other = tmp_path / "again" / "manifest.jsonl"
    run_generation(discover_sources(corpus["sources"]), build_backends("mock"), datagen_cfg, other, quiet=True)
    first = {r.id: r for r in load_records(manifest)}
    second = {r.id: r for r in load_records(other)}
    assert first.keys() == second.keys()
    for key, record in first.items():
        assert record.pseudo_label == second[key].pseudo_label
        assert np.array_equal(record.load_image(manifest.parent), second[key].load_image(other.parent))


def test_malformed_backend_response_discards_the_record(tmp_path, corpus):
    class Broken:
        def outpaint(self, req):
            raise BackendResponseError("bad payload")

    backends = Backends(Broken(), MockCaptioner(), MockDetector())
    cfg = DatagenConfig(canvas_size=128, amplify=1, workers=1)
    path = tmp_path / "broken" / "manifest.jsonl"
    stats = run_generation(discover_sources(corpus["sources"]), backends, cfg, path, quiet=True)
    assert stats.written == 0
    assert stats.discarded == stats.sources - sum(stats.prefiltered.values())


def test_record_invariants(manifest):
    row = read_jsonl(manifest)[0]
    record = DatasetRecord.from_json(row)
    assert DatasetRecord.from_json(record.to_json()).to_json() == record.to_json()

    with pytest.raises(ValueError):
        DatasetRecord.from_json({**row, "filter_flags": [FLAG_KEPT, FLAG_EXTRA_SUBJECT]})
    with pytest.raises(ValueError):
        DatasetRecord.from_json({**row, "schema_version": 99})
    with pytest.raises(ValueError):
        DatasetRecord.from_json({**row, "subject_bbox": [0.0, 0.0, 0.01, 0.01], "pseudo_label": [0.5, 0.5, 1.0, 1.0]})


def test_config_validation():
    with pytest.raises(ValueError):
        DatagenConfig(amplify=0)
    with pytest.raises(ValueError):
        DatagenConfig(area_range=(0.6, 0.2))


def test_mock_failure_rate_plants_bad_canvases(tmp_path, corpus):
    backends = Backends(MockOutpainter(failure_rate=1.0), MockCaptioner(), MockDetector())
    cfg = DatagenConfig(canvas_size=128, amplify=1, workers=1)
    path = tmp_path / "bad" / "manifest.jsonl"
    run_generation(discover_sources(corpus["sources"]), backends, cfg, path, quiet=True)
    for record in load_records(path):
        image = load_image(path.parent / record.outpainted_path)
        assert image.shape == (128, 128, 3)
