"""Cluster-based ensemble fusion with per-detector weights.

Boxes from all detectors are grouped around the most confident remaining box
(at most one box per detector, the one overlapping the seed most), clusters
supported by fewer than ``min_sources`` detectors are dropped, and each
surviving cluster is collapsed into a single box whose coordinates are the
score*weight weighted average of its members and whose score is the
weight-averaged member score over all detectors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .dataset import Detection, atomic_write_text, dumps_json, read_json
from .errors import NumericalError, ValidationError
from .geometry import BoundingBox, iou
from .nms import confidence_order

CoordinateRule = Literal["normalized", "linear"]
RULES = ("normalized", "linear")
DENOMINATOR_EPS = 1e-9


@dataclass(frozen=True)
class Cluster:
    class_id: int
    members: dict[int, Detection]  # detector_id -> detection
    seed_detector_id: int

    @property
    def image_id(self) -> str:
        return self.members[self.seed_detector_id].image_id

    @property
    def seed(self) -> Detection:
        return self.members[self.seed_detector_id]

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class WeightVector:
    weights: tuple[float, ...]
    detector_names: tuple[str, ...] = ()
    coordinate_rule: CoordinateRule = "normalized"

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "detector_names", tuple(self.detector_names))
        if not all(np.isfinite(self.weights)):
            raise ValidationError("weights must be finite")
        if self.detector_names and len(self.detector_names) != len(self.weights):
            raise ValidationError(
                f"{len(self.weights)} weights for {len(self.detector_names)} detector names")
        if self.coordinate_rule not in RULES:
            raise ValidationError(f"unknown coordinate_rule {self.coordinate_rule!r}")

    @classmethod
    def uniform(cls, n: int, detector_names: Sequence[str] = (),
                coordinate_rule: CoordinateRule = "normalized") -> WeightVector:
        return cls(tuple([1.0 / n] * n), tuple(detector_names), coordinate_rule)

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def ensemble_id(self) -> int:
        """Reserved detector id given to fused detections."""
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def to_dict(self) -> dict:
        return {
            "detector_names": list(self.detector_names),
            "weights": [float(w) for w in self.weights],
            "coordinate_rule": self.coordinate_rule,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> WeightVector:
        if not isinstance(doc, dict) or set(doc) != {"detector_names", "weights", "coordinate_rule"}:
            raise ValidationError(
                "weights file needs exactly detector_names, weights, coordinate_rule")
        return cls(tuple(doc["weights"]), tuple(doc["detector_names"]), doc["coordinate_rule"])

    def check_detectors(self, detector_names: Sequence[str]) -> None:
        if list(self.detector_names) != list(detector_names):
            raise ValidationError(
                f"weights were learned for detectors {list(self.detector_names)}, "
                f"bundle has {list(detector_names)}")


def save_weights(weights: WeightVector, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_json(weights.to_dict()))


def load_weights(path: str | os.PathLike) -> WeightVector:
    return WeightVector.from_dict(read_json(path))


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.5
    min_sources: int = 2
    coordinate_rule: CoordinateRule = "normalized"

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.min_sources < 1:
            raise ValidationError("min_sources must be >= 1")
        if self.coordinate_rule not in RULES:
            raise ValidationError(f"unknown coordinate_rule {self.coordinate_rule!r}")


def build_clusters(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Cluster]:
    """Partition one image's detections into clusters.

    Per class, the most confident unassigned box seeds a cluster; every other
    detector contributes its unassigned box with the highest IoU to the seed,
    provided that IoU exceeds the threshold. Every detection ends up in
    exactly one cluster.
    """
    order = confidence_order(detections)
    per_class: dict[int, list[int]] = {}
    for i in order:
        per_class.setdefault(detections[i].class_id, []).append(i)

    clusters: list[Cluster] = []
    for class_id, idxs in per_class.items():
        unassigned = list(idxs)  # stays in confidence order
        while unassigned:
            seed_idx = unassigned[0]
            seed = detections[seed_idx]
            members = {seed.detector_id: seed}
            taken = {seed_idx}
            best: dict[int, tuple[float, int]] = {}
            for j in unassigned[1:]:
                det = detections[j]
                if det.detector_id == seed.detector_id:
                    continue
                overlap = iou(seed.box, det.box)
                if overlap <= iou_threshold:
                    continue
                # strict > keeps the earlier (more confident) box on IoU ties
                if det.detector_id not in best or overlap > best[det.detector_id][0]:
                    best[det.detector_id] = (overlap, j)
            for det_id in sorted(best):
                j = best[det_id][1]
                members[det_id] = detections[j]
                taken.add(j)
            clusters.append(Cluster(class_id, dict(sorted(members.items())), seed.detector_id))
            unassigned = [j for j in unassigned if j not in taken]
    return clusters


def _cluster_matrix(cluster: Cluster, n_detectors: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-filled (D, 4) box matrix and (D,) score vector for a cluster."""
    boxes = np.zeros((n_detectors, 4))
    scores = np.zeros(n_detectors)
    for det_id, det in cluster.members.items():
        if not 0 <= det_id < n_detectors:
            raise ValidationError(f"detector_id {det_id} has no weight (D={n_detectors})")
        boxes[det_id] = det.box.as_tuple()
        scores[det_id] = det.score
    return boxes, scores


def fuse_cluster(cluster: Cluster, weights: WeightVector,
                 rule: CoordinateRule = "normalized") -> Detection:
    """Collapse a cluster into one detection.

    Detectors absent from the cluster count as score 0 with an all-zero box.
    ``normalized``: each coordinate is sum(s*w*c) / sum(s*w).
    ``linear``: coordinates are w^T X with X the score-scaled box matrix.
    The score is sum(w*s) / sum(w) over all detectors in both cases, clipped
    into [0, 1] (only reachable with negative weights).
    """
    w = weights.as_array()
    boxes, scores = _cluster_matrix(cluster, len(w))
    sw = scores * w
    if rule == "normalized":
        denom = sw.sum()
        if abs(denom) <= DENOMINATOR_EPS:
            raise NumericalError(
                f"degenerate coordinate normalisation (sum s*w = {denom:.3g}) for cluster "
                f"seeded by detector {cluster.seed_detector_id} in image {cluster.image_id!r}")
        coords = sw @ boxes / denom
    elif rule == "linear":
        coords = sw @ boxes
    else:
        raise ValidationError(f"unknown coordinate rule {rule!r}")

    wsum = w.sum()
    if abs(wsum) <= DENOMINATOR_EPS:
        raise NumericalError(
            f"degenerate score normalisation (sum w = {wsum:.3g}) for cluster in image "
            f"{cluster.image_id!r}")
    score = float(np.clip(sw.sum() / wsum, 0.0, 1.0))
    try:
        box = BoundingBox(*(float(c) for c in coords))
    except ValidationError as exc:
        raise NumericalError(f"fused box is invalid in image {cluster.image_id!r}: {exc}") from exc
    return Detection(box=box, class_id=cluster.class_id, score=score,
                     detector_id=weights.ensemble_id, image_id=cluster.image_id)


def ensemble_fuse(detections: Sequence[Detection], weights: WeightVector,
                  config: FusionConfig = FusionConfig()) -> list[Detection]:
    if config.min_sources > len(weights):
        raise ValidationError(
            f"min_sources={config.min_sources} exceeds detector count {len(weights)}")
    clusters = build_clusters(detections, config.iou_threshold)
    fused = [fuse_cluster(c, weights, config.coordinate_rule)
             for c in clusters if len(c) >= config.min_sources]
    # stable sort: equal scores keep cluster creation order
    return sorted(fused, key=lambda d: -d.score)
