"""Evaluation: best-label IoU/Disp reports, ranking metrics, conditioning sweeps
and the qualitative annotation store."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from config.assumptions import ASPECT_SWEEP_AREA
from core.backends import MockDetector, SubjectDetector
from core.cropmodel import Conditioning, CropPredictor, Prediction, rank_candidates, subject_from_bbox
from core.geometry import CropRect, ImageDims, SubjectRegion, evaluate_against_labels, iou
from utils.data_loader import ManifestWriter, load_image, load_mask, read_jsonl, resolve_path, save_image
from utils.errors import UserInputError
from utils.log import get_logger
from utils.render import draw_overlay, overlay_strip

log = get_logger(__name__)

AREA_SWEEP = tuple(round(0.1 * i, 1) for i in range(1, 11))
ASPECT_SWEEP = tuple(float(v) for v in np.geomspace(9 / 16, 16 / 9, 7))


@dataclass
class EvalEntry:
    id: str
    image_path: Path
    labels: List[CropRect]
    subject_bbox: Optional[CropRect] = None
    subject_mask_path: Optional[Path] = None
    caption: str = ""

    def load_image(self) -> np.ndarray:
        return load_image(self.image_path)

    def subject(self, image: np.ndarray, detector: Optional[SubjectDetector] = None) -> Optional[SubjectRegion]:
        if self.subject_mask_path is not None:
            return SubjectRegion.from_mask(load_mask(self.subject_mask_path))
        if self.subject_bbox is not None:
            return subject_from_bbox(self.subject_bbox, ImageDims.of(image))
        if detector is not None:
            found = detector.detect_subjects(image)
            return found[0].region if found else None
        return None


def load_eval_manifest(path: str | Path) -> List[EvalEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for row in read_jsonl(path):
        labels = [CropRect.from_list(v) for v in row.get("labels", [])]
        if not labels:
            raise UserInputError(f"Evaluation entry {row.get('id')} has no labels.")
        entries.append(
            EvalEntry(
                id=str(row["id"]),
                image_path=resolve_path(row["image_path"], root),
                labels=labels,
                subject_bbox=CropRect.from_list(row["subject_bbox"]) if row.get("subject_bbox") else None,
                subject_mask_path=resolve_path(row["subject_mask_path"], root) if row.get("subject_mask_path") else None,
                caption=row.get("caption", ""),
            )
        )
    if not entries:
        raise UserInputError(f"Evaluation manifest {path} is empty.")
    return entries


# -- croppers ----------------------------------------------------------------

CropFn = Callable[[EvalEntry, np.ndarray], Union[CropRect, Prediction]]


@dataclass(frozen=True)
class CenterCropBaseline:
    """Centered crop covering ``area`` of the frame, same aspect as the image."""

    area: float = 0.64

    def __call__(self, entry: EvalEntry, image: np.ndarray) -> CropRect:
        side = math.sqrt(self.area)
        lo = (1.0 - side) / 2
        return CropRect(lo, lo, lo + side, lo + side)

    @classmethod
    def mean_label_area(cls, entries: Sequence[EvalEntry]) -> "CenterCropBaseline":
        return cls(float(np.mean([e.labels[0].area for e in entries])))


class OracleBaseline:
    """Returns the first label; the upper bound for any cropper."""

    def __call__(self, entry: EvalEntry, image: np.ndarray) -> CropRect:
        return entry.labels[0]


def predictor_crop_fn(predictor: CropPredictor, detector: Optional[SubjectDetector] = None) -> CropFn:
    detector = detector or MockDetector()

    def crop(entry: EvalEntry, image: np.ndarray) -> Prediction:
        return predictor.predict(image, entry.subject(image, detector))

    return crop


# -- reports -----------------------------------------------------------------


@dataclass
class EvalConfig:
    workers: int = 4
    baseline: Optional[str] = None
    center_area: Optional[float] = None


@dataclass
class EvalReport:
    per_image: pd.DataFrame
    skipped: List[str] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.per_image)

    @property
    def mean_iou(self) -> float:
        return float(self.per_image["iou"].mean()) if self.n else float("nan")

    @property
    def mean_disp(self) -> float:
        return float(self.per_image["disp"].mean()) if self.n else float("nan")

    def aggregates(self) -> Dict[str, Any]:
        return {"mean_iou": self.mean_iou, "mean_disp": self.mean_disp, "n": self.n, "skipped": len(self.skipped)}

    def write(self, out_dir: str | Path) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "per_image.csv"
        self.per_image.to_csv(csv_path, index=False)
        json_path = out_dir / "report.json"
        payload = {**self.aggregates(), "skipped_ids": self.skipped, "config": self.config}
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")
        return {"csv": csv_path, "json": json_path}


def evaluate(
    crop_fn: CropFn,
    entries: Sequence[EvalEntry],
    cfg: Optional[EvalConfig] = None,
    config_snapshot: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """Run ``crop_fn`` on every entry and score it against its best-IoU label."""

    cfg = cfg or EvalConfig()
    if not entries:
        raise UserInputError("Nothing to evaluate: the manifest is empty.")

    def run(entry: EvalEntry) -> Optional[Dict[str, Any]]:
        try:
            image = entry.load_image()
        except (UserInputError, FileNotFoundError, OSError) as exc:
            log.warning("skipping %s: %s", entry.id, exc)
            return None
        result = crop_fn(entry, image)
        warned = False
        if isinstance(result, Prediction):
            result, warned = result.crop, result.warning
        best_iou, disp = evaluate_against_labels(result, entry.labels)
        x1, y1, x2, y2 = result.as_tuple()
        return {"id": entry.id, "x1": x1, "y1": y1, "x2": x2, "y2": y2, "iou": best_iou, "disp": disp, "warning": warned}

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        rows = list(pool.map(run, entries))

    skipped = [e.id for e, row in zip(entries, rows) if row is None]
    frame = pd.DataFrame(
        [row for row in rows if row is not None],
        columns=["id", "x1", "y1", "x2", "y2", "iou", "disp", "warning"],
    )
    report = EvalReport(frame, skipped, {**asdict(cfg), **(config_snapshot or {})})
    log.info("evaluated %d images: IoU %.4f, Disp %.4f (%d skipped)", report.n, report.mean_iou, report.mean_disp, len(skipped))
    return report


def evaluate_checkpoint(checkpoint: str | Path, manifest: str | Path, cfg: Optional[EvalConfig] = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    entries = load_eval_manifest(manifest)
    if cfg.baseline == "center":
        crop_fn: CropFn = CenterCropBaseline(cfg.center_area) if cfg.center_area else CenterCropBaseline.mean_label_area(entries)
    elif cfg.baseline == "oracle":
        crop_fn = OracleBaseline()
    elif cfg.baseline:
        raise UserInputError(f"Unknown baseline '{cfg.baseline}'; expected 'center' or 'oracle'.")
    else:
        crop_fn = predictor_crop_fn(CropPredictor.from_checkpoint(checkpoint))
    return evaluate(crop_fn, entries, cfg, {"checkpoint": str(checkpoint), "manifest": str(manifest)})


# -- ranking metrics ---------------------------------------------------------


@dataclass(frozen=True)
class RankingScore:
    srcc: float
    acc_k: float
    srcc_defined: bool = True


def ranking_metrics(pred_scores: Sequence[float], gt_scores: Sequence[float], k: int = 5) -> RankingScore:
    """Spearman correlation (average ranks for ties) and top-1-in-top-K accuracy."""

    pred = np.asarray(pred_scores, dtype=np.float64)
    gt = np.asarray(gt_scores, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"Score lists differ in length ({len(pred)} vs {len(gt)}).")
    if pred.size < 2:
        raise ValueError("Rank correlation needs at least two items.")
    if k <= 0:
        raise ValueError("K must be positive.")

    rp, rg = stats.rankdata(pred), stats.rankdata(gt)
    if np.ptp(rp) == 0 or np.ptp(rg) == 0:
        log.warning("constant score list; rank correlation reported as 0")
        srcc, defined = 0.0, False
    else:
        srcc, defined = float(np.corrcoef(rp, rg)[0, 1]), True

    top_k = np.argsort(-gt, kind="stable")[:k]
    acc = float(int(np.argmax(pred)) in set(top_k.tolist()))
    return RankingScore(srcc, acc, defined)


def dataset_ranking_metrics(
    per_image: Iterable[Tuple[Sequence[float], Sequence[float]]], ks: Sequence[int] = (5, 10)
) -> Dict[str, float]:
    """Mean SRCC and mean Acc_K over images."""

    srccs: List[float] = []
    accs: Dict[int, List[float]] = {k: [] for k in ks}
    for pred, gt in per_image:
        srccs.append(ranking_metrics(pred, gt).srcc)
        for k in ks:
            accs[k].append(ranking_metrics(pred, gt, k).acc_k)
    if not srccs:
        raise UserInputError("No images to compute ranking metrics on.")
    return {"srcc": float(np.mean(srccs)), **{f"acc_{k}": float(np.mean(v)) for k, v in accs.items()}}


def candidate_ranking_report(
    predictor: CropPredictor,
    entries: Sequence[EvalEntry],
    candidates: Sequence[CropRect],
    ks: Sequence[int] = (5, 10),
    detector: Optional[SubjectDetector] = None,
) -> Dict[str, float]:
    """Ranking variant scores vs. candidate IoU with the best label, as SRCC / Acc_K."""

    if predictor.cfg.variant != "ranking":
        raise UserInputError("Candidate ranking needs a ranking checkpoint.")
    detector = detector or MockDetector()
    per_image = []
    for entry in entries:
        image = entry.load_image()
        ranked = rank_candidates(predictor.model, predictor.cfg, image, entry.subject(image, detector), candidates)
        by_rect = {c.as_tuple(): s for c, s in ranked}
        pred = [by_rect[c.as_tuple()] for c in candidates]
        gt = [max(iou(c, label) for label in entry.labels) for c in candidates]
        per_image.append((pred, gt))
    return dataset_ranking_metrics(per_image, ks)


# -- conditioning sweep ------------------------------------------------------


@dataclass
class SweepResult:
    axis: str
    values: List[float]
    crops: List[CropRect]
    strip: np.ndarray

    def areas(self) -> List[float]:
        return [c.area for c in self.crops]

    def area_correlation(self) -> float:
        rho, _pvalue = stats.spearmanr(self.values, self.areas())
        return 0.0 if np.isnan(rho) else float(rho)


def conditioning_sweep(
    predictor: CropPredictor,
    image: np.ndarray,
    subject: Optional[SubjectRegion],
    axis: str = "area",
    values: Optional[Sequence[float]] = None,
) -> SweepResult:
    """One crop per conditioning value plus an overlay strip.

    Area sweeps pass the value as the area signal; aspect sweeps pass the value
    as height/width while holding area at the fixed sweep level.
    """

    if not predictor.is_conditional:
        raise UserInputError("Conditioning sweeps need a conditional checkpoint.")
    if axis not in ("area", "aspect"):
        raise UserInputError(f"Unknown sweep axis '{axis}'; expected 'area' or 'aspect'.")
    if axis == "aspect" and predictor.cfg.conditioning != "area_aspect":
        raise UserInputError("This checkpoint is conditioned on area only; it cannot sweep aspect.")
    values = list(values or (AREA_SWEEP if axis == "area" else ASPECT_SWEEP))

    crops, renders = [], []
    box = subject.bbox if subject is not None else None
    for value in values:
        cond = Conditioning.from_values(value) if axis == "area" else Conditioning.from_values(ASPECT_SWEEP_AREA, value)
        crop = predictor.predict(image, subject, cond).crop
        crops.append(crop)
        renders.append(draw_overlay(image, crop, box))
    return SweepResult(axis, values, crops, overlay_strip(renders))


def write_sweep(result: SweepResult, out_dir: str | Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    strip = save_image(out_dir / f"sweep_{result.axis}.png", result.strip)
    table = out_dir / f"sweep_{result.axis}.csv"
    pd.DataFrame(
        [{"value": v, "x1": c.x1, "y1": c.y1, "x2": c.x2, "y2": c.y2, "area": c.area} for v, c in zip(result.values, result.crops)]
    ).to_csv(table, index=False)
    return {"strip": strip, "table": table}


# -- qualitative annotations -------------------------------------------------

QUESTIONS = ("v1", "v2", "v3", "v4", "v5")


@dataclass
class QualitativeRecord:
    image_id: str
    method_id: str
    v1: bool
    v2: bool
    v3: bool
    v4: bool
    v5: bool
    annotator_id: str
    notes: str = ""


class QualitativeStore:
    """Append-only JSONL store of human answers to the five crop questions."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)

    def append(self, record: QualitativeRecord) -> None:
        with ManifestWriter(self.path) as writer:
            writer.append(asdict(record))

    def load(self) -> List[QualitativeRecord]:
        if not self.path.is_file():
            return []
        return [QualitativeRecord(**row) for row in read_jsonl(self.path)]

    def summary(self) -> pd.DataFrame:
        """Fraction of "yes" answers per method and question."""

        frame = pd.DataFrame([asdict(r) for r in self.load()])
        if frame.empty:
            return pd.DataFrame(columns=["method_id", *QUESTIONS])
        return frame.groupby("method_id")[list(QUESTIONS)].mean().reset_index()
