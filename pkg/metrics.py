"""Detection evaluation: IoU, matching, per-class P/R/F1, all-point AP and mAP."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]  # x_min, y_min, x_max, y_max

CLASS_NAMES = ("Anger", "Disgust", "Fear", "Happy", "Neutral", "Sad", "Surprise")
ROUNDING_NOTE = "values rounded half away from zero"


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Box


# =========================
# IoU
# =========================
def _check_box(box: Sequence[float]) -> None:
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {tuple(box)}: need x_min < x_max and y_min < y_max")


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    _check_box(box_a)
    _check_box(box_b)
    iw = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    ih = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (box_a[2] - box_a[0]) * (box_a[3] - box_a[1])
    area_b = (box_b[2] - box_b[0]) * (box_b[3] - box_b[1])
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) arrays of valid boxes."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(hi - lo, 0, None).prod(axis=-1)
    area_a = (a[:, 2:] - a[:, :2]).prod(axis=-1)
    area_b = (b[:, 2:] - b[:, :2]).prod(axis=-1)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


# =========================
# Matching
# =========================
@dataclass
class MatchResult:
    is_tp: List[bool]                  # per prediction, in the input order
    matched_gt: List[Optional[int]]    # GT index per prediction, None for FP
    gt_detected: List[bool]
    iou_threshold: float

    @property
    def tp(self) -> int:
        return int(np.sum(self.is_tp))

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_detected) - int(np.sum(self.gt_detected))


def match(predictions: Sequence[Detection], ground_truths: Sequence[GroundTruth],
          iou_threshold: float = 0.5) -> MatchResult:
    """Greedy by descending score (stable); best unmatched same-class GT, lower index on IoU ties."""
    is_tp = [False] * len(predictions)
    matched: List[Optional[int]] = [None] * len(predictions)
    taken = [False] * len(ground_truths)
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    for i in order:
        pred = predictions[i]
        best, best_iou = None, -1.0
        for j, gt in enumerate(ground_truths):
            if taken[j] or gt.class_id != pred.class_id:
                continue
            overlap = iou(pred.box, gt.box)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best is not None and best_iou >= iou_threshold:
            taken[best] = True
            is_tp[i] = True
            matched[i] = best
    return MatchResult(is_tp=is_tp, matched_gt=matched, gt_detected=taken, iou_threshold=iou_threshold)


# =========================
# Scalar metrics
# =========================
def precision_recall_f1(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    if min(tp, fp, fn) < 0:
        raise ValueError(f"counts must be non-negative, got tp={tp} fp={fp} fn={fn}")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def average_precision(outcomes: Sequence[bool], gt_count: int) -> float:
    """All-point AP of TP/FP outcomes already ranked by descending score."""
    outcomes = np.asarray(outcomes, dtype=bool)
    if gt_count == 0:
        if outcomes.size:
            logger.warning("AP requested for a class with no ground truth but %d predictions; reporting 0", outcomes.size)
        return 0.0
    if outcomes.size == 0:
        return 0.0
    tp = np.cumsum(outcomes)
    fp = np.cumsum(~outcomes)
    recall = np.concatenate([[0.0], tp / gt_count, [1.0]])
    precision = np.concatenate([[0.0], tp / (tp + fp), [0.0]])
    # right-max envelope
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.where(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


# =========================
# Reports
# =========================
@dataclass
class ClassReport:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    ap: float = 0.0


@dataclass
class EvalReport:
    per_class: List[ClassReport]
    class_names: Sequence[str] = CLASS_NAMES
    avg_precision: float = 0.0
    avg_recall: float = 0.0
    avg_f1: float = 0.0
    map: float = 0.0
    title: str = ""

    def as_dict(self) -> Dict[str, float]:
        return {"map": self.map, "avg_precision": self.avg_precision,
                "avg_recall": self.avg_recall, "avg_f1": self.avg_f1}


def map_and_averages(per_class: Sequence[ClassReport], class_names: Optional[Sequence[str]] = None) -> EvalReport:
    if not per_class:
        raise ValueError("at least one class is required")
    names = list(class_names) if class_names is not None else [
        CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}" for i in range(len(per_class))]

    def mean(values):
        values = [v for v in values if np.isfinite(v)]
        return float(np.mean(values)) if values else 0.0
    return EvalReport(
        per_class=list(per_class), class_names=names,
        avg_precision=mean([r.precision for r in per_class]),
        avg_recall=mean([r.recall for r in per_class]),
        avg_f1=mean([r.f1 for r in per_class]),
        map=mean([r.ap for r in per_class]),
    )


def evaluate_detections(predictions: Sequence[Sequence[Detection]], ground_truths: Sequence[Sequence[GroundTruth]],
                        class_count: int, iou_threshold: float = 0.5, conf_threshold: float = 0.5,
                        class_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Per-image predictions and GT -> report.

    AP ranks every prediction given; precision/recall/F1 count only those with
    score >= conf_threshold.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truths)} images")
    scored: List[List[Tuple[float, bool]]] = [[] for _ in range(class_count)]
    counts = np.zeros((class_count, 3), dtype=np.int64)  # tp, fp, fn at conf_threshold
    gt_counts = np.zeros(class_count, dtype=np.int64)
    for preds, gts in zip(predictions, ground_truths):
        for gt in gts:
            gt_counts[gt.class_id] += 1
        result = match(preds, gts, iou_threshold)
        for pred, tp in zip(preds, result.is_tp):
            scored[pred.class_id].append((pred.score, tp))
        confident = [p for p in preds if p.score >= conf_threshold]
        strict = match(confident, gts, iou_threshold)
        for pred, tp in zip(confident, strict.is_tp):
            counts[pred.class_id, 0 if tp else 1] += 1
        for gt, found in zip(gts, strict.gt_detected):
            if not found:
                counts[gt.class_id, 2] += 1
    rows = []
    for k in range(class_count):
        ranked = sorted(scored[k], key=lambda item: -item[0])
        p, r, f1 = precision_recall_f1(*(int(v) for v in counts[k]))
        rows.append(ClassReport(precision=p, recall=r, f1=f1,
                                ap=average_precision([tp for _, tp in ranked], int(gt_counts[k]))))
    return map_and_averages(rows, class_names)


def round_half_up(value: float, places: int) -> str:
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(quantum, rounding=ROUND_HALF_UP))


def format_report(report: EvalReport) -> str:
    """Fixed-width table: F1, Recall %, Precision %, AP %."""
    lines = []
    if report.title:
        lines.append(report.title)
    lines.append(f"{'Class':<10} {'F1':>6} {'Recall%':>9} {'Precision%':>11} {'AP%':>8}")
    for name, row in zip(report.class_names, report.per_class):
        lines.append(f"{name:<10} {round_half_up(row.f1, 2):>6} {round_half_up(row.recall * 100, 2):>9} "
                     f"{round_half_up(row.precision * 100, 2):>11} {round_half_up(row.ap * 100, 2):>8}")
    lines.append(f"{'Average':<10} {round_half_up(report.avg_f1, 2):>6} {round_half_up(report.avg_recall * 100, 2):>9} "
                 f"{round_half_up(report.avg_precision * 100, 2):>11} {round_half_up(report.map * 100, 2):>8}")
    lines.append(f"mAP% {round_half_up(report.map * 100, 2)}  ({ROUNDING_NOTE})")
    return "\n".join(lines)


def write_report_csv(report: EvalReport, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["class", "f1", "recall_pct", "precision_pct", "ap_pct"])
    for name, row in zip(report.class_names, report.per_class):
        writer.writerow([name, round_half_up(row.f1, 2), round_half_up(row.recall * 100, 2),
                         round_half_up(row.precision * 100, 2), round_half_up(row.ap * 100, 2)])
    writer.writerow(["Average", round_half_up(report.avg_f1, 2), round_half_up(report.avg_recall * 100, 2),
                     round_half_up(report.avg_precision * 100, 2), round_half_up(report.map * 100, 2)])
