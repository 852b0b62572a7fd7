"""PASCAL VOC 2012 style average precision and MAP reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Detection, GroundTruthBox
from .errors import ValidationError
from .geometry import BoundingBox, iou

DEFAULT_IOU_THRESHOLDS = (0.5, 0.75, 0.85)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    score_floor: float = 0.05

    def __post_init__(self) -> None:
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        if not self.iou_thresholds or not all(0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValidationError("iou_thresholds must be non-empty and within (0, 1]")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValidationError("score_floor must be in [0, 1)")


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthBox],
                     iou_threshold: float) -> np.ndarray:
    """True-positive flags for detections taken in the given (ranked) order.

    Each detection claims the unmatched same-image ground-truth box with the
    highest IoU at or above the threshold; ties go to the earlier box.
    """
    gt_by_image: dict[str, list[BoundingBox]] = {}
    for g in ground_truth:
        gt_by_image.setdefault(g.image_id, []).append(g.box)
    taken = {k: [False] * len(v) for k, v in gt_by_image.items()}
    tp = np.zeros(len(detections), dtype=bool)
    for k, det in enumerate(detections):
        boxes = gt_by_image.get(det.image_id, ())
        best, best_iou = -1, -1.0
        for gi, gbox in enumerate(boxes):
            if taken[det.image_id][gi]:
                continue
            overlap = iou(det.box, gbox)
            if overlap >= iou_threshold and overlap > best_iou:
                best, best_iou = gi, overlap
        if best >= 0:
            taken[det.image_id][best] = True
            tp[k] = True
    return tp


def envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone upper envelope of a PR curve (all-points)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    change = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[change + 1] - mrec[change]) * mpre[change + 1]))


def rank_detections(detections: Sequence[Detection], score_floor: float = 0.0) -> list[Detection]:
    kept = [(i, d) for i, d in enumerate(detections) if d.score >= score_floor]
    kept.sort(key=lambda p: (-p[1].score, p[1].image_id, p[0]))
    return [d for _, d in kept]


def average_precision(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthBox],
                      iou_threshold: float = 0.5, score_floor: float = 0.05) -> float:
    """AP for a single class; 0 when there is no ground truth."""
    if not ground_truth:
        return 0.0
    ranked = rank_detections(detections, score_floor)
    if not ranked:
        return 0.0
    tp = match_detections(ranked, ground_truth, iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / len(ground_truth)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    return envelope_area(recall, precision)


@dataclass
class EvalReport:
    iou_thresholds: tuple[float, ...]
    ap: dict[float, dict[int, float]]
    map: dict[float, float]
    num_detections: int
    num_ground_truth: dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.num_ground_truth)

    def to_dict(self, class_names: Sequence[str] = ()) -> dict:
        def cname(c: int) -> str:
            return class_names[c] if c < len(class_names) else str(c)
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "map": {f"{t:g}": self.map[t] for t in self.iou_thresholds},
            "ap": {f"{t:g}": {cname(c): self.ap[t][c] for c in sorted(self.ap[t])}
                   for t in self.iou_thresholds},
            "num_detections": self.num_detections,
            "num_ground_truth": {cname(c): n for c, n in sorted(self.num_ground_truth.items())},
        }


def evaluate(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthBox],
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """Per-class AP and MAP at each threshold, over classes with ground truth."""
    gt_by_class: dict[int, list[GroundTruthBox]] = {}
    for g in ground_truth:
        gt_by_class.setdefault(g.class_id, []).append(g)
    det_by_class: dict[int, list[Detection]] = {}
    for d in detections:
        det_by_class.setdefault(d.class_id, []).append(d)
    classes = sorted(gt_by_class)
    ap: dict[float, dict[int, float]] = {}
    mean_ap: dict[float, float] = {}
    for t in config.iou_thresholds:
        ap[t] = {c: average_precision(det_by_class.get(c, []), gt_by_class[c], t, config.score_floor)
                 for c in classes}
        mean_ap[t] = float(np.mean(list(ap[t].values()))) if classes else 0.0
    return EvalReport(
        iou_thresholds=config.iou_thresholds,
        ap=ap,
        map=mean_ap,
        num_detections=sum(1 for d in detections if d.score >= config.score_floor),
        num_ground_truth={c: len(gt_by_class[c]) for c in classes},
    )


def mean_report(reports: Sequence[EvalReport]) -> EvalReport:
    """Average of several reports.

    MAP is the mean of the per-report MAPs, skipping reports without any
    ground truth; per-class AP is averaged over the reports where that class
    had ground truth.
    """
    if not reports:
        raise ValidationError("no reports to average")
    thresholds = reports[0].iou_thresholds
    ap: dict[float, dict[int, float]] = {}
    for t in thresholds:
        classes = sorted({c for r in reports for c in r.ap[t]})
        ap[t] = {c: float(np.mean([r.ap[t][c] for r in reports if c in r.ap[t]])) for c in classes}
    gt_counts: dict[int, int] = {}
    for r in reports:
        for c, n in r.num_ground_truth.items():
            gt_counts[c] = gt_counts.get(c, 0) + n
    scored = [r for r in reports if r.num_ground_truth] or list(reports)
    return EvalReport(
        iou_thresholds=thresholds,
        ap=ap,
        map={t: float(np.mean([r.map[t] for r in scored])) for t in thresholds},
        num_detections=sum(r.num_detections for r in reports),
        num_ground_truth=gt_counts,
    )


def format_table(reports: Mapping[str, EvalReport], class_names: Sequence[str] = ()) -> str:
    """Plain-text table: one block per IoU threshold, methods as rows,
    classes plus TOTAL as columns, values in percent."""
    if not reports:
        return ""
    first = next(iter(reports.values()))
    classes = sorted({c for r in reports.values() for t in r.iou_thresholds for c in r.ap[t]})
    names = [class_names[c] if c < len(class_names) else str(c) for c in classes]
    headers = ["IoU", "method", *names, "TOTAL"]
    rows = []
    for t in first.iou_thresholds:
        for method, rep in reports.items():
            cells = [f"{100 * rep.ap[t][c]:.2f}" if c in rep.ap[t] else "-" for c in classes]
            rows.append([f"{t:g}", method, *cells, f"{100 * rep.map[t]:.2f}"])
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)]

    def line(cells: Sequence[str]) -> str:
        return "  ".join(str(c).rjust(w) if i >= 2 else str(c).ljust(w)
                         for i, (c, w) in enumerate(zip(cells, widths))).rstrip()

    out = [line(headers), line(["-" * w for w in widths])]
    prev_t = None
    for row in rows:
        if prev_t is not None and row[0] != prev_t:
            out.append("")
        out.append(line(row))
        prev_t = row[0]
    return "\n".join(out) + "\n"
