from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest

from core.backends import Detection, MockDetector
from core.datagen import FLAG_EXTRA_SUBJECT, FLAG_KEPT, FLAG_QUALITY_REJECT, DatasetRecord, load_records
from core.geometry import CropRect, ImageDims, SubjectRegion
from core.qualityfilter import (
    FilterConfig,
    QualityClassifier,
    QualityNet,
    QualityTrainConfig,
    QualityVerdict,
    extra_subject_heuristic,
    filter_manifest,
    judge_records,
    make_quality_examples,
    train_quality_classifier,
)
from utils.data_loader import save_image, save_mask, write_jsonl
from utils.errors import UserInputError

CANVAS = ImageDims(200, 200)


def _det(box: Tuple[int, int, int, int], label: str = "subject") -> Detection:
    mask = np.zeros((CANVAS.height, CANVAS.width), dtype=bool)
    x1, y1, x2, y2 = box
    mask[y1:y2, x1:x2] = True
    return Detection(class_label=label, score=1.0, region=SubjectRegion.from_mask(mask))


def _record(subject_box, label_box, record_id: str = "r0", **paths) -> DatasetRecord:
    return DatasetRecord(
        id=record_id,
        source_id=record_id.split("-")[0],
        source_path="",
        outpainted_path=paths.get("image", ""),
        mask_path=paths.get("mask", ""),
        caption="",
        subject_bbox=CropRect.from_pixels(subject_box, CANVAS),
        pseudo_label=CropRect.from_pixels(label_box, CANVAS),
        placement={},
        repeat_index=0,
        seed=0,
    )


# subject of 100x100 = 10000 px inside a label covering the left half of the canvas
SUBJECT = (20, 50, 120, 150)
LABEL = (0, 0, 130, 200)


def test_heuristic_rejects_above_a_quarter_of_the_subject():
    record = _record(SUBJECT, LABEL)
    assert extra_subject_heuristic(record, [_det(SUBJECT), _det((140, 10, 192, 60))])  # 52 x 50 = 2600
    assert not extra_subject_heuristic(record, [_det(SUBJECT), _det((140, 10, 188, 60))])  # 48 x 50 = 2400
    assert not extra_subject_heuristic(record, [_det(SUBJECT)])
    assert not extra_subject_heuristic(record, [])


def test_heuristic_ignores_detections_centered_inside_the_label_and_other_classes():
    record = _record(SUBJECT, LABEL)
    assert not extra_subject_heuristic(record, [_det(SUBJECT), _det((0, 0, 100, 40))])
    assert not extra_subject_heuristic(record, [_det(SUBJECT), _det((140, 10, 199, 199), label="dog")])


def test_verdict_flags():
    assert QualityVerdict.decide(False, 0.1, 0.5).flags == {FLAG_KEPT}
    verdict = QualityVerdict.decide(True, 0.9, 0.5)
    assert verdict.rejected and verdict.flags == {FLAG_EXTRA_SUBJECT, FLAG_QUALITY_REJECT}
    assert QualityVerdict.decide(False, 0.99, 1.01).flags == {FLAG_KEPT}


def _planted_manifest(root: Path, n: int = 8) -> Tuple[Path, List[str]]:
    """Grey canvases with one red subject; every third record also gets a big blue subject outside the label."""

    rows, planted = [], []
    for index in range(n):
        image = np.full((CANVAS.height, CANVAS.width, 3), 128, dtype=np.uint8)
        image[50:150, 20:120] = (210, 40, 40)
        mask = np.zeros((CANVAS.height, CANVAS.width), dtype=bool)
        mask[50:150, 20:120] = True
        record_id = f"s{index}-r0"
        if index % 3 == 0:
            image[20:80, 140:195] = (40, 70, 210)
            planted.append(record_id)
        save_image(root / "images" / f"{record_id}.png", image)
        save_mask(root / "masks" / f"{record_id}.png", mask)
        record = _record(SUBJECT, LABEL, record_id, image=f"images/{record_id}.png", mask=f"masks/{record_id}.png")
        rows.append(record.to_json())
    return write_jsonl(root / "manifest.jsonl", rows), planted


def test_filter_manifest_rejects_exactly_the_planted_records(tmp_path):
    manifest, planted = _planted_manifest(tmp_path)
    records, stats = filter_manifest(manifest, MockDetector(), FilterConfig(classifier=False, workers=2))
    assert sorted(r.id for r in records if not r.kept) == sorted(planted)
    assert stats.by_reason == {FLAG_EXTRA_SUBJECT: len(planted)}
    assert stats.kept + stats.rejected == stats.total == 8

    reloaded = load_records(manifest)
    assert [r.filter_flags for r in reloaded] == [r.filter_flags for r in records]

    again, stats_again = filter_manifest(manifest, MockDetector(), FilterConfig(classifier=False, workers=1))
    assert [r.filter_flags for r in again] == [r.filter_flags for r in records]
    assert stats_again.as_dict() == stats.as_dict()


def test_disabled_filters_reject_nothing(tmp_path):
    manifest, _planted = _planted_manifest(tmp_path)
    _records, stats = filter_manifest(manifest, MockDetector(), FilterConfig(heuristic=False, classifier=False))
    assert stats.rejected == 0


def test_threshold_above_one_never_rejects(tmp_path):
    manifest, _planted = _planted_manifest(tmp_path)
    classifier = QualityClassifier(QualityNet(64), input_size=64)
    records = load_records(manifest)
    verdicts = judge_records(records, None, FilterConfig(heuristic=False, threshold=1.01), classifier, manifest.parent)
    assert not any(v.rejected for v in verdicts)
    assert all(0.0 <= v.classifier_score <= 1.0 for v in verdicts)


def test_filtered_manifest_must_stay_beside_images(tmp_path):
    manifest, _planted = _planted_manifest(tmp_path)
    with pytest.raises(UserInputError):
        filter_manifest(manifest, MockDetector(), FilterConfig(classifier=False), out_path=tmp_path / "elsewhere" / "m.jsonl")


def test_quality_examples_are_balanced():
    examples = make_quality_examples(8, seed=0, canvas_size=96)
    assert [bad for _img, bad in examples] == [False, False, True, True] * 2
    assert all(img.shape == (96, 96, 3) for img, _bad in examples)


def test_classifier_needs_both_classes():
    clean = [(img, False) for img, bad in make_quality_examples(4, canvas_size=64) if not bad]
    with pytest.raises(UserInputError):
        train_quality_classifier(clean, QualityTrainConfig(epochs=1, input_size=64))


def test_classifier_training_is_deterministic_and_round_trips(tmp_path):
    examples = make_quality_examples(8, seed=1, canvas_size=64)
    cfg = QualityTrainConfig(epochs=2, lr=1e-3, batch_size=4, input_size=64, seed=5)
    first = train_quality_classifier(examples, cfg)
    second = train_quality_classifier(examples, cfg)
    assert first.history == second.history

    score = first.predict(examples[0][0])
    assert 0.0 <= score <= 1.0
    loaded = QualityClassifier.load(first.save(tmp_path / "quality.pt"))
    assert loaded.predict(examples[0][0]) == pytest.approx(score, abs=1e-6)


def test_quality_config_validation():
    with pytest.raises(ValueError):
        QualityTrainConfig(input_size=100)
    with pytest.raises(ValueError):
        QualityTrainConfig(epochs=0)


@pytest.mark.slow
def test_classifier_separates_bad_canvases():
    train_set = make_quality_examples(160, seed=0)
    held_out = make_quality_examples(64, seed=1)
    classifier = train_quality_classifier(train_set, QualityTrainConfig(epochs=30, lr=1e-3, batch_size=32, seed=0))
    scores = classifier.score([img for img, _bad in held_out])
    labels = np.array([bad for _img, bad in held_out])
    assert np.mean((scores >= 0.5) == labels) >= 0.9
