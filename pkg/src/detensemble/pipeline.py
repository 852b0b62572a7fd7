"""Bundle-level pipelines and the cross-validation harnesses.

Every method (each base detector, NMS fusion, the weighted ensemble and, for
video, the refined ensemble) is scored on the same test images.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Sequence, TypeVar

import numpy as np

from .dataset import DatasetBundle, Detection
from .errors import ValidationError
from .evaluation import EvalConfig, EvalReport, evaluate, format_table, mean_report
from .fusion import FusionConfig, WeightVector, ensemble_fuse
from .nms import NmsConfig, nms_fuse
from .refine import (RefineConfig, TrackerFactory, default_box_tracker, detections_from_frames,
                     frames_from_bundle, refine)
from .training import TrainConfig, TrainReport, build_pairs, train_weights

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

ENSEMBLE_NAME = "ensemble"
NMS_NAME = "nms"
REFINED_NAME = "ensemble-tr"


@dataclass(frozen=True)
class PipelineConfig:
    nms: NmsConfig = NmsConfig()
    fusion: FusionConfig = FusionConfig()
    train: TrainConfig = TrainConfig()
    refine: RefineConfig = RefineConfig()
    eval: EvalConfig = EvalConfig()
    folds: int = 5
    train_size: int = 100
    segments: int = 5
    train_tail: int = 100
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.train.prediction_rule != self.fusion.coordinate_rule:
            raise ValidationError(
                f"training rule {self.train.prediction_rule!r} differs from fusion rule "
                f"{self.fusion.coordinate_rule!r}")
        if min(self.folds, self.train_size, self.segments, self.train_tail, self.threads) < 1:
            raise ValidationError("folds, train_size, segments, train_tail, threads must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> PipelineConfig:
        """Build from a nested JSON-style mapping; unknown keys are rejected."""
        sections = {"nms": NmsConfig, "fusion": FusionConfig, "train": TrainConfig,
                    "refine": RefineConfig, "eval": EvalConfig}
        scalars = {f.name for f in fields(cls)} - set(sections)
        kwargs: dict[str, Any] = {}
        for key, val in doc.items():
            if key in sections:
                sub = sections[key]
                allowed = {f.name for f in fields(sub)}
                if not isinstance(val, dict) or not set(val) <= allowed:
                    raise ValidationError(f"config section {key!r} accepts {sorted(allowed)}")
                if key == "eval" and "iou_thresholds" in val:
                    val = {**val, "iou_thresholds": tuple(val["iou_thresholds"])}
                kwargs[key] = sub(**val)
            elif key in scalars:
                kwargs[key] = val
            else:
                raise ValidationError(f"unknown config key {key!r}")
        if "fusion" in kwargs and "train" not in kwargs:
            kwargs["train"] = TrainConfig(prediction_rule=kwargs["fusion"].coordinate_rule)
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["eval"]["iou_thresholds"] = list(self.eval.iou_thresholds)
        return d

    def train_config(self) -> TrainConfig:
        return replace(self.train, rng_seed=self.seed)


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """Order-preserving map; output does not depend on ``threads``."""
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _per_image(bundle: DatasetBundle, fn: Callable[[list[Detection]], list[Detection]],
               threads: int) -> list[Detection]:
    groups = list(bundle.detections_by_image().values())
    return [d for out in parallel_map(fn, groups, threads) for d in out]


def nms_bundle(bundle: DatasetBundle, config: NmsConfig = NmsConfig(),
               threads: int = 1) -> DatasetBundle:
    return bundle.with_detections(_per_image(bundle, lambda ds: nms_fuse(ds, config), threads))


def fuse_bundle(bundle: DatasetBundle, weights: WeightVector,
                config: FusionConfig = FusionConfig(), threads: int = 1) -> DatasetBundle:
    """Ensemble-fuse every image. The output gains an ``ensemble`` detector name."""
    weights.check_detectors(bundle.detector_names)
    fused = _per_image(bundle, lambda ds: ensemble_fuse(ds, weights, config), threads)
    return bundle.with_detections(fused, [*bundle.detector_names, ENSEMBLE_NAME])


def refine_bundle(bundle: DatasetBundle, config: RefineConfig = RefineConfig(),
                  tracker_factory: TrackerFactory = default_box_tracker) -> DatasetBundle:
    frames = refine(frames_from_bundle(bundle), config, tracker_factory)
    return bundle.with_detections(detections_from_frames(frames))


def train_on(bundle: DatasetBundle, image_ids: Sequence[str],
             config: PipelineConfig = PipelineConfig()) -> tuple[WeightVector, TrainReport]:
    pairs = build_pairs(bundle, image_ids, config.fusion.iou_threshold)
    log.info("built %d training pairs from %d images", len(pairs), len(image_ids))
    return train_weights(pairs, config.train_config(), bundle.detector_names)


@dataclass
class SplitResult:
    reports: dict[str, EvalReport]
    weights: WeightVector
    train_report: TrainReport
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def to_dict(self, class_names: Sequence[str] = ()) -> dict:
        return {
            "num_train_images": len(self.train_ids),
            "num_test_images": len(self.test_ids),
            "train_report": self.train_report.to_dict(),
            "reports": {m: r.to_dict(class_names) for m, r in self.reports.items()},
        }


def run_split(bundle: DatasetBundle, train_ids: Sequence[str], test_ids: Sequence[str],
              config: PipelineConfig = PipelineConfig(), video: bool = False) -> SplitResult:
    """Train on ``train_ids`` and score every method on ``test_ids``."""
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise ValidationError(f"train and test images overlap: {sorted(overlap)[:3]}")
    weights, train_report = train_on(bundle, train_ids, config)
    test = bundle.subset(test_ids)
    gt = test.ground_truth
    reports: dict[str, EvalReport] = {}
    for j, name in enumerate(bundle.detector_names):
        reports[name] = evaluate([d for d in test.detections if d.detector_id == j], gt, config.eval)
    reports[NMS_NAME] = evaluate(nms_bundle(test, config.nms, config.threads).detections,
                                 gt, config.eval)
    fused = fuse_bundle(test, weights, config.fusion, config.threads)
    reports[ENSEMBLE_NAME] = evaluate(fused.detections, gt, config.eval)
    if video:
        reports[REFINED_NAME] = evaluate(refine_bundle(fused, config.refine).detections,
                                         gt, config.eval)
    return SplitResult(reports, weights, train_report, list(train_ids), list(test_ids))


@dataclass
class CVResult:
    splits: list[SplitResult]
    mean: dict[str, EvalReport]
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "splits": [s.to_dict(self.class_names) for s in self.splits],
            "mean": {m: r.to_dict(self.class_names) for m, r in self.mean.items()},
        }

    def table(self) -> str:
        return format_table(self.mean, self.class_names)


def _collect(splits: list[SplitResult], class_names: Sequence[str]) -> CVResult:
    methods = list(splits[0].reports)
    mean = {m: mean_report([s.reports[m] for s in splits]) for m in methods}
    return CVResult(splits, mean, list(class_names))


def image_folds(image_ids: Sequence[str], folds: int, seed: int) -> list[list[str]]:
    perm = np.random.default_rng([seed, 2]).permutation(len(image_ids))
    return [[image_ids[i] for i in part] for part in np.array_split(perm, folds)]


def cv_image(bundle: DatasetBundle, config: PipelineConfig = PipelineConfig()) -> CVResult:
    """k-fold harness: each fold contributes ``train_size`` training images,
    every other image of the dataset is the fold's test set."""
    ids = [im.image_id for im in bundle.images]
    need = config.folds * config.train_size
    if len(ids) < need:
        raise ValidationError(
            f"{len(ids)} images; {config.folds} folds x {config.train_size} need at least {need}")
    splits = []
    for k, fold in enumerate(image_folds(ids, config.folds, config.seed)):
        train_ids = fold[:config.train_size]
        chosen = set(train_ids)
        test_ids = [i for i in ids if i not in chosen]
        log.info("fold %d: %d train / %d test images", k, len(train_ids), len(test_ids))
        splits.append(run_split(bundle, train_ids, test_ids, config))
    return _collect(splits, bundle.class_names)


def video_segments(n_frames: int, segments: int, train_tail: int) -> list[tuple[range, range]]:
    """(test head, training tail) frame-position ranges per contiguous segment."""
    if n_frames < segments * (train_tail + 1):
        raise ValidationError(
            f"video of {n_frames} frames too short for {segments} segments with "
            f"{train_tail} training frames each")
    size = n_frames // segments
    out = []
    for s in range(segments):
        start = s * size
        stop = n_frames if s == segments - 1 else start + size
        out.append((range(start, stop - train_tail), range(stop - train_tail, stop)))
    return out


def cv_video(bundle: DatasetBundle, config: PipelineConfig = PipelineConfig()) -> CVResult:
    """Per segment: learn weights on the last ``train_tail`` frames, then fuse,
    refine and score the uninterrupted head of the segment."""
    frames = bundle.frames()
    splits = []
    for s, (head, tail) in enumerate(video_segments(len(frames), config.segments,
                                                     config.train_tail)):
        train_ids = [frames[k].image_id for k in tail]
        test_ids = [frames[k].image_id for k in head]
        log.info("segment %d: test frames %d-%d, train frames %d-%d",
                 s, head.start, head.stop - 1, tail.start, tail.stop - 1)
        splits.append(run_split(bundle, train_ids, test_ids, config, video=True))
    return _collect(splits, bundle.class_names)
