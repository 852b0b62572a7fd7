"""Ensembling of object detector outputs.

Weighted cluster fusion with regression-learned per-detector weights, an NMS
baseline, tracking-based refinement for video and a VOC-style evaluation
harness.
"""

from .dataset import (DatasetBundle, Detection, GroundTruthBox, ImageRecord, from_xywh,
                      load_bundle, save_bundle)
from .errors import DetEnsembleError, NumericalError, StorageError, ValidationError
from .evaluation import EvalConfig, EvalReport, average_precision, evaluate
from .fusion import (Cluster, FusionConfig, WeightVector, build_clusters, ensemble_fuse,
                     fuse_cluster)
from .geometry import BoundingBox, area, iou
from .nms import NmsConfig, nms_fuse
from .refine import (ConstantVelocityTracker, Frame, RefineConfig, default_box_tracker,
                     stage1_fill_gaps, stage2_prune_short_tracks)
from .training import TrainConfig, TrainingPair, TrainReport, build_pairs, mse, train_weights

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "Cluster", "ConstantVelocityTracker", "DatasetBundle", "DetEnsembleError",
    "Detection", "EvalConfig", "EvalReport", "Frame", "FusionConfig", "GroundTruthBox",
    "ImageRecord", "NmsConfig", "NumericalError", "RefineConfig", "StorageError",
    "TrainConfig", "TrainReport", "TrainingPair", "ValidationError", "WeightVector", "area",
    "average_precision", "build_clusters", "build_pairs", "default_box_tracker",
    "ensemble_fuse", "evaluate", "from_xywh", "fuse_cluster", "iou", "load_bundle", "mse",
    "nms_fuse", "save_bundle", "stage1_fill_gaps", "stage2_prune_short_tracks",
    "train_weights",
]
