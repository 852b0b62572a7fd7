"""Baseline fusion: pool every detector's boxes and run class-wise NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataset import Detection
from .errors import ValidationError
from .geometry import iou


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


def confidence_order(detections: Sequence[Detection]) -> list[int]:
    """Indices sorted by descending score, ties by lower detector_id then input order."""
    return sorted(range(len(detections)),
                  key=lambda i: (-detections[i].score, detections[i].detector_id, i))


def nms_fuse(detections: Sequence[Detection], config: NmsConfig = NmsConfig()) -> list[Detection]:
    """Per-class greedy NMS over detections of a single image.

    A remaining box is suppressed when its IoU with a kept box is strictly
    greater than the threshold. Kept detections are returned unchanged,
    ordered by the same confidence order used for suppression.
    """
    order = confidence_order(detections)
    by_class: dict[int, list[int]] = {}
    for i in order:
        by_class.setdefault(detections[i].class_id, []).append(i)

    keep: set[int] = set()
    for idxs in by_class.values():
        remaining = list(idxs)
        while remaining:
            best = remaining.pop(0)
            keep.add(best)
            box = detections[best].box
            remaining = [j for j in remaining if iou(box, detections[j].box) <= config.iou_threshold]
    return [detections[i] for i in order if i in keep]
