from __future__ import annotations

import numpy as np
import pytest

from core.datagen import load_records, sample_canvas_placement
from core.geometry import CropRect, ImageDims
from core.pairsampler import ViewParams, crop_to_view, dump_pairs, sample_enclosing_view, sample_view_rect
from utils.data_loader import read_jsonl

CANVAS = ImageDims(512, 512)
LABEL = CropRect.from_pixels((206, 216, 306, 296), CANVAS)


def _draws(n: int, label: CropRect = LABEL, canvas: ImageDims = CANVAS, params: ViewParams = ViewParams()):
    rng = np.random.default_rng(0)
    return [sample_view_rect(label, canvas, rng, params) for _ in range(n)]


def test_view_statistics_follow_the_sampling_parameters():
    views = _draws(10_000)
    assert not any(v.fallback for v in views)
    assert np.mean([v.flipped for v in views]) == pytest.approx(0.2, abs=0.02)
    assert np.mean([v.snapped_edge is not None for v in views]) == pytest.approx(0.25, abs=0.02)
    assert np.mean([v.scale for v in views]) == pytest.approx(1.5, abs=0.02)
    assert all(1.0 <= v.aspect <= 16 / 9 + 1e-9 for v in views)
    # an unflipped 100x80 label gives a landscape view
    assert all(v.landscape != v.flipped for v in views)


def test_views_always_contain_the_label():
    rng = np.random.default_rng(1)
    canvas = ImageDims(256, 192)
    for _ in range(2000):
        x1, y1 = int(rng.integers(0, 200)), int(rng.integers(0, 150))
        x2, y2 = int(rng.integers(x1 + 8, 257)), int(rng.integers(y1 + 8, 193))
        label = CropRect.from_pixels((x1, y1, x2, y2), canvas)
        view = sample_view_rect(label, canvas, rng)
        assert view.rect.contains(label)
        assert label.area >= 0.25 * view.rect.area - 1e-12
        px1, py1, px2, py2 = view.rect.to_pixels(canvas)
        assert all(abs(v - round(v)) < 1e-6 for v in (px1, py1, px2, py2))


def _placed_labels(n: int, seed: int = 0):
    """Labels placed on the canvas the way dataset generation pastes sources."""

    rng = np.random.default_rng(seed)
    sources = [ImageDims(640, 480), ImageDims(480, 640), ImageDims(600, 600), ImageDims(768, 432), ImageDims(400, 600)]
    for index in range(n):
        p = sample_canvas_placement(sources[index % len(sources)], rng)
        yield CropRect.from_pixels((p.offset_x, p.offset_y, p.offset_x + p.width, p.offset_y + p.height), CANVAS)


def test_placed_labels_keep_a_quarter_of_the_view():
    rng = np.random.default_rng(3)
    views = [(label, sample_view_rect(label, CANVAS, rng)) for label in _placed_labels(20_000)]
    for label, view in views:
        assert view.rect.contains(label)
        assert label.area >= 0.25 * view.rect.area - 1e-12
        assert 1.0 <= view.aspect <= 16 / 9 + 1e-9
    assert sum(v.fallback for _, v in views) < 0.01 * len(views)

    drawn = [v for _, v in views if not v.fallback]
    assert all(v.scale_bounds[0] - 1e-12 <= v.scale <= v.scale_bounds[1] + 1e-12 for v in drawn)
    # uniform over whatever part of [1, 2] the canvas allows
    spread = [v for v in drawn if v.scale_bounds[1] - v.scale_bounds[0] > 1e-3]
    positions = [(v.scale - v.scale_bounds[0]) / (v.scale_bounds[1] - v.scale_bounds[0]) for v in spread]
    assert np.mean(positions) == pytest.approx(0.5, abs=0.02)

    unconstrained = [v.scale for v in drawn if v.scale_bounds == (1.0, 2.0)]
    assert len(unconstrained) > 2000
    assert np.mean(unconstrained) == pytest.approx(1.5, abs=0.02)


def test_elongated_label_uses_itself_as_the_view():
    label = CropRect.from_pixels((10, 200, 500, 240), CANVAS)
    view = sample_view_rect(label, CANVAS, np.random.default_rng(0))
    assert view.fallback and view.degenerate
    assert view.rect.as_tuple() == pytest.approx(label.as_tuple())


def test_snapped_edge_is_shared_with_the_label():
    for view in _draws(400):
        if view.snapped_edge is None:
            continue
        side = {"left": 0, "top": 1, "right": 2, "bottom": 3}[view.snapped_edge]
        assert view.rect.as_tuple()[side] == pytest.approx(LABEL.as_tuple()[side], abs=1.5 / 512)


def test_square_labels_are_never_flipped():
    square = CropRect.from_pixels((200, 200, 300, 300), CANVAS)
    assert not any(v.flipped for v in _draws(500, label=square))


def test_oversized_label_falls_back_to_the_tightest_view():
    canvas = ImageDims(320, 320)
    label = CropRect.from_pixels((10, 100, 310, 200), canvas)
    views = _draws(20, label=label, canvas=canvas, params=ViewParams(scale_range=(1.5, 2.0)))
    assert all(v.fallback for v in views)
    assert all(v.rect.contains(label) for v in views)


def test_full_canvas_label_is_degenerate():
    view = sample_view_rect(CropRect.full(), CANVAS, np.random.default_rng(0))
    assert view.degenerate
    assert view.rect == CropRect.full()


def test_view_params_validation():
    with pytest.raises(ValueError):
        ViewParams(aspect_range=(0.5, 2.0))
    with pytest.raises(ValueError):
        ViewParams(scale_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        ViewParams(max_attempts=0)


def test_crop_to_view_cuts_the_pixel_box():
    image = np.arange(20 * 10 * 3, dtype=np.uint8).reshape(10, 20, 3)
    view = CropRect(0.25, 0.2, 0.75, 0.8)
    assert np.array_equal(crop_to_view(image, view), image[2:8, 5:15])


def test_training_pair_maps_back_to_the_record(manifest):
    root = manifest.parent
    for index, record in enumerate(load_records(manifest)[:4]):
        pair = sample_enclosing_view(record, np.random.default_rng(index), root)
        x1, y1, x2, y2 = pair.view_spec.rect.to_pixel_box(ImageDims.of(record.load_image(root)))
        assert pair.view_image.shape == (y2 - y1, x2 - x1, 3)
        assert pair.canvas_label().as_tuple() == pytest.approx(record.pseudo_label.as_tuple(), abs=1e-6)
        assert pair.view_subject is not None
        assert pair.subject_bbox.intersects(pair.label)


def test_dump_pairs_writes_overlays(manifest, tmp_path):
    records = load_records(manifest)
    path = dump_pairs(records, tmp_path / "pairs", n=5, seed=3, root=manifest.parent)
    rows = read_jsonl(path)
    assert len(rows) == 5
    for row in rows:
        assert (path.parent / row["image"]).is_file()
        assert CropRect.from_list(row["view"]).contains(CropRect.from_list(row["label"]).from_frame(CropRect.from_list(row["view"])))
    assert read_jsonl(dump_pairs(records, tmp_path / "again", n=5, seed=3, root=manifest.parent)) == rows
