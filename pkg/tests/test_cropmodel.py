from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from core.cropmodel import (
    Conditioning,
    CropPredictor,
    CropRanker,
    ModelConfig,
    anchor_centers,
    anchor_mask,
    blend_proposals,
    build_model,
    candidate_grid,
    decode_proposals,
    extract_crop_from_scores,
    from_square,
    load_checkpoint,
    outside_pool,
    preprocess,
    rank_candidates,
    ranking_score,
    require_subject_for,
    save_checkpoint,
    subject_from_bbox,
    to_square,
)
from core.geometry import CropRect, ImageDims, SubjectRegion
from utils.errors import UserInputError


def _image(w: int, h: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 255, size=(h, w, 3), dtype=np.uint8)


def test_preprocess_square_image(tiny_model_cfg, box_subject):
    prepared = preprocess(_image(64, 64), box_subject, tiny_model_cfg)
    assert prepared.tensor.shape == (4, 64, 64)
    assert prepared.valid == (1.0, 1.0)
    assert prepared.subject_box.as_tuple() == pytest.approx(box_subject.bbox.as_tuple())
    assert torch.equal(prepared.tensor[3].bool(), torch.from_numpy(box_subject.mask))


def test_preprocess_pads_wide_images_at_the_bottom(tiny_model_cfg):
    mask = np.zeros((64, 128), dtype=bool)
    mask[10:40, 20:60] = True
    subject = SubjectRegion.from_mask(mask)
    prepared = preprocess(_image(128, 64), subject, tiny_model_cfg)
    assert prepared.valid == (1.0, 0.5)
    assert prepared.dims == ImageDims(128, 64)
    assert float(prepared.tensor[:, 32:].abs().sum()) == 0.0
    assert prepared.subject_box.y2 <= 0.5
    assert from_square(prepared.subject_box.as_tuple(), prepared.valid).as_tuple() == pytest.approx(subject.bbox.as_tuple())


def test_preprocess_without_subject_awareness(tiny_model_cfg, box_subject):
    cfg = replace(tiny_model_cfg, subject_aware=False)
    prepared = preprocess(_image(64, 64), box_subject, cfg)
    assert prepared.subject_box is None
    assert bool((prepared.tensor[3] == 1).all())


def test_square_mapping_round_trip():
    rect = CropRect(0.1, 0.2, 0.7, 0.9)
    valid = (1.0, 0.5625)
    assert from_square(to_square(rect, valid).as_tuple(), valid).as_tuple() == pytest.approx(rect.as_tuple())


def test_decoded_proposals_contain_their_anchor():
    cx, cy = anchor_centers(4)
    raw = torch.randn(2, 16, 4, generator=torch.Generator().manual_seed(0)) * 3
    rects = decode_proposals(raw, cx, cy)
    assert bool((rects >= 0).all() and (rects <= 1).all())
    assert bool((rects[..., 0] <= cx).all() and (rects[..., 2] >= cx).all())
    assert bool((rects[..., 1] <= cy).all() and (rects[..., 3] >= cy).all())


def test_blend_single_anchor_is_identity():
    proposals = torch.rand(1, 16, 4)
    mask = torch.zeros(1, 16, dtype=torch.bool)
    mask[0, 5] = True
    blended, weights = blend_proposals(proposals, torch.randn(1, 16), mask)
    assert torch.allclose(blended[0], proposals[0, 5])
    assert float(weights[0, 5]) == pytest.approx(1.0)


def test_blend_two_anchors_by_softmax():
    p1 = torch.tensor([0.1, 0.1, 0.5, 0.5])
    p2 = torch.tensor([0.4, 0.2, 0.9, 0.8])
    proposals = torch.stack([p1, p2]).unsqueeze(0)
    blended, weights = blend_proposals(proposals, torch.tensor([[math.log(2), 0.0]]), torch.ones(1, 2, dtype=torch.bool))
    assert torch.allclose(blended[0], 2 / 3 * p1 + 1 / 3 * p2, atol=1e-6)
    assert float(weights.sum()) == pytest.approx(1.0)


def test_masked_logits_do_not_move_the_blend():
    gen = torch.Generator().manual_seed(1)
    proposals = torch.rand(1, 16, 4, generator=gen)
    logits = torch.randn(1, 16, generator=gen)
    mask = torch.zeros(1, 16, dtype=torch.bool)
    mask[0, [2, 3, 9]] = True
    blended, weights = blend_proposals(proposals, logits, mask)
    changed = logits.clone()
    changed[~mask] = 50.0
    again, _ = blend_proposals(proposals, changed, mask)
    assert torch.allclose(blended, again)
    assert float(weights[~mask].sum()) == 0.0

    chosen = proposals[0, mask[0]]
    assert bool((blended[0] >= chosen.min(0).values - 1e-6).all() and (blended[0] <= chosen.max(0).values + 1e-6).all())


def test_blending_invariants_over_random_forward_passes(tiny_model_cfg):
    torch.manual_seed(0)
    model = build_model(tiny_model_cfg).eval()
    gen = torch.Generator().manual_seed(0)
    size = 50
    for _round in range(20):
        x = torch.randn(size, 4, 64, 64, generator=gen)
        corners = torch.rand(size, 2, 2, generator=gen)
        boxes = torch.cat([corners.min(dim=1).values, corners.max(dim=1).values], dim=1)
        # covers the center of anchor 5 only
        boxes[0] = torch.tensor([0.3, 0.3, 0.45, 0.45])
        valid = torch.ones(size, 2)
        valid[1::3, 0] = 0.5
        with torch.no_grad():
            out = model(x, boxes, valid)

        proposals = out.grid.proposals.reshape(size, -1, 4)
        mask = out.grid.anchor_mask.reshape(size, -1)
        weights = out.grid.softmax().reshape(size, -1)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(size), atol=1e-6)

        perturbed = out.grid.weights.reshape(size, -1).masked_fill(~mask, 1e4)
        again, _ = blend_proposals(proposals, perturbed, mask)
        assert torch.allclose(again, out.raw_blended, atol=1e-6)

        lo = proposals.masked_fill(~mask[..., None], math.inf).min(dim=1).values
        hi = proposals.masked_fill(~mask[..., None], -math.inf).max(dim=1).values
        assert bool(((out.raw_blended >= lo - 1e-6) & (out.raw_blended <= hi + 1e-6)).all())
        assert torch.allclose(out.raw_blended[0], proposals[0, 5], atol=1e-6)


def test_anchor_mask_selects_anchors_on_the_subject():
    valid = torch.ones(1, 2)
    mask, fallback = anchor_mask(torch.tensor([[0.3, 0.3, 0.45, 0.45]]), valid, 4)
    assert mask[0].nonzero().flatten().tolist() == [5]
    assert not bool(fallback[0])

    mask, fallback = anchor_mask(torch.tensor([[0.4, 0.4, 0.6, 0.6]]), torch.tensor([[0.5, 1.0]]), 4)
    assert bool(fallback[0])
    cx, _cy = anchor_centers(4)
    assert torch.equal(mask[0], cx < 0.5)


def test_outside_pool_of_an_empty_box_is_plain_average_pooling():
    features = torch.randn(1, 3, 4, 4, generator=torch.Generator().manual_seed(2))
    pooled = outside_pool(features, torch.zeros(1, 1, 4), 3)
    assert torch.allclose(pooled, F.adaptive_avg_pool2d(features, 3), atol=1e-6)


def test_cropper_forward_shapes(tiny_model_cfg):
    model = build_model(tiny_model_cfg).eval()
    x = torch.randn(2, 4, 64, 64)
    boxes = torch.tensor([[0.2, 0.2, 0.7, 0.7], [0.1, 0.3, 0.4, 0.9]])
    valid = torch.tensor([[1.0, 1.0], [1.0, 0.5]])
    with torch.no_grad():
        out = model(x, boxes, valid)
    assert out.grid.proposals.shape == (2, 4, 4, 4)
    assert out.grid.weights.shape == (2, 4, 4)
    assert out.blended.shape == (2, 4)
    assert float(out.blended[1, 3]) <= 0.5 + 1e-6
    assert torch.allclose(out.grid.softmax().reshape(2, -1).sum(-1), torch.ones(2))


def test_conditional_model_requires_conditioning(tiny_model_cfg):
    model = build_model(replace(tiny_model_cfg, variant="conditional")).eval()
    with pytest.raises(ValueError):
        model(torch.randn(1, 4, 64, 64), torch.tensor([[0.2, 0.2, 0.6, 0.6]]))


def test_unet_extraction_keeps_the_largest_component():
    scores = np.zeros((64, 64))
    scores[2:17, 2:22] = 0.9  # 15 x 20 = 300 px
    scores[40:50, 40:60] = 0.9  # 10 x 20 = 200 px
    crop, warning = extract_crop_from_scores(scores)
    assert not warning
    assert crop.as_tuple() == pytest.approx((2 / 64, 2 / 64, 22 / 64, 17 / 64))


def test_unet_extraction_falls_back_to_the_full_frame():
    crop, warning = extract_crop_from_scores(np.full((32, 32), 0.4))
    assert warning and crop == CropRect.full()
    _crop, warning = extract_crop_from_scores(np.full((32, 32), 0.5))
    assert warning


def test_unet_extraction_ignores_padding():
    scores = np.full((32, 32), 0.9)
    crop, _warning = extract_crop_from_scores(scores, valid=(1.0, 0.5))
    assert crop == CropRect.full()


def test_candidate_grid_covers_the_area_range():
    candidates = candidate_grid()
    areas = [c.area for c in candidates]
    assert len(candidates) >= 64
    assert min(areas) >= 0.3 - 1e-6
    assert CropRect.full() in candidates


def test_ranker_scores_are_probabilities(tiny_model_cfg, box_subject):
    cfg = replace(tiny_model_cfg, variant="ranking")
    model = build_model(cfg)
    assert isinstance(model, CropRanker)
    scores = ranking_score(model, torch.randn(3, 4, 64, 64))
    assert bool(((scores >= 0) & (scores <= 1)).all())

    ranked = rank_candidates(model, cfg, _image(64, 64), box_subject, candidate_grid(steps=3))
    values = [score for _rect, score in ranked]
    assert values == sorted(values, reverse=True)


@pytest.mark.parametrize("variant", ["base", "conditional", "unet", "ranking"])
def test_checkpoint_round_trip(tmp_path, tiny_model_cfg, box_subject, variant):
    cfg = replace(tiny_model_cfg, variant=variant)
    torch.manual_seed(0)
    model = build_model(cfg).eval()
    path = save_checkpoint(tmp_path / f"{variant}.pt", model, cfg, {"epoch": 1})
    loaded, loaded_cfg, meta = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert meta == {"epoch": 1}

    image = _image(64, 48, seed=3)
    subject = subject_from_bbox(CropRect(0.3, 0.3, 0.6, 0.7), ImageDims(64, 48))
    first = CropPredictor(model, cfg).predict(image, subject, Conditioning.from_values(0.5))
    second = CropPredictor.from_checkpoint(path).predict(image, subject, Conditioning.from_values(0.5))
    assert first.crop.as_tuple() == pytest.approx(second.crop.as_tuple(), abs=1e-5)


def test_checkpoint_version_and_missing_file(tmp_path, tiny_model_cfg):
    path = save_checkpoint(tmp_path / "model.pt", build_model(tiny_model_cfg), tiny_model_cfg)
    payload = torch.load(path, map_location="cpu")
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(UserInputError, match="version"):
        load_checkpoint(path)
    with pytest.raises(UserInputError):
        load_checkpoint(tmp_path / "missing.pt")


def test_require_subject_for(tiny_model_cfg, box_subject):
    with pytest.raises(UserInputError, match="--subject-bbox"):
        require_subject_for(tiny_model_cfg, None)
    require_subject_for(tiny_model_cfg, box_subject)
    require_subject_for(replace(tiny_model_cfg, subject_aware=False), None)
    require_subject_for(replace(tiny_model_cfg, variant="unet"), None)


def test_subject_from_bbox():
    region = subject_from_bbox(CropRect(0.25, 0.5, 0.75, 1.0), ImageDims(40, 20))
    assert region.pixel_count == 20 * 10
    assert region.bbox == CropRect(0.25, 0.5, 0.75, 1.0)


def test_config_and_conditioning_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="gan")
    with pytest.raises(ValueError):
        ModelConfig(fused_channels=10, encoder_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(extra_channels=1)
    with pytest.raises(ValueError):
        Conditioning(area=0.0)
    with pytest.raises(ValueError):
        Conditioning(area=0.5, aspect=(2.0, 2.0))
    assert Conditioning.from_values(0.4, 2.0).to_vector("area_aspect") == [0.4, 2.0, 0.5]
    assert Conditioning.from_rect(CropRect(0, 0, 0.5, 0.5), ImageDims(200, 100)).aspect[0] == pytest.approx(0.5)
