"""Learning per-detector weights from detection / ground-truth pairs.

Each training pair is a (D, 4) matrix whose row j is detector j's box
(normalised by image size) multiplied by its score, zero when detector j
found nothing. Weights are fitted by per-sample SGD on the mean squared
coordinate error, with a held-out validation split for early stopping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .dataset import DatasetBundle, Detection
from .errors import NumericalError, ValidationError
from .fusion import RULES, CoordinateRule, WeightVector
from .geometry import iou

log = logging.getLogger(__name__)

DENOMINATOR_EPS = 1e-9
_LINEAR, _NORMALIZED = 0, 1


@dataclass(frozen=True, eq=False)
class TrainingPair:
    X: np.ndarray        # (D, 4) score-scaled normalised boxes, zero rows for absent detectors
    g: np.ndarray        # (4,) normalised ground truth
    scores: np.ndarray   # (D,) raw detector scores, 0 where absent
    present: np.ndarray  # (D,) bool

    def __post_init__(self) -> None:
        if not self.present.any():
            raise ValidationError("training pair has no present detector")
        if np.any(self.X[~self.present] != 0) or np.any(self.scores[~self.present] != 0):
            raise ValidationError("absent detector rows must be exactly zero")
        if self.g[2] <= self.g[0] or self.g[3] <= self.g[1]:
            raise ValidationError(f"ground truth {self.g} has no area")

    @classmethod
    def from_boxes(cls, boxes: np.ndarray, scores: np.ndarray, g: np.ndarray) -> TrainingPair:
        """Build from (D, 4) normalised boxes (zero rows = absent) and scores."""
        boxes = np.asarray(boxes, dtype=float)
        scores = np.asarray(scores, dtype=float)
        present = scores > 0
        return cls(X=boxes * scores[:, None], g=np.asarray(g, dtype=float),
                   scores=scores, present=present)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    val_fraction: float = 0.30
    patience: int = 50
    max_epochs: int = 20000
    rng_seed: int = 0
    prediction_rule: CoordinateRule = "normalized"

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("patience and max_epochs must be positive")
        if self.prediction_rule not in RULES:
            raise ValidationError(f"unknown prediction_rule {self.prediction_rule!r}")


@dataclass
class TrainReport:
    epochs: int
    best_val_mse: float
    train_mse: float
    weights: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "best_val_mse": self.best_val_mse,
                "train_mse": self.train_mse, "weights": list(self.weights)}


def _best_match(candidates: list[tuple[float, Detection]]) -> Detection:
    # order-independent tie-break: IoU, then score, then coordinates
    return max(candidates, key=lambda c: (c[0], c[1].score, c[1].box.as_tuple()))[1]


def build_pairs(bundle: DatasetBundle, image_ids: Sequence[str],
                iou_threshold: float = 0.5) -> list[TrainingPair]:
    """One pair per ground-truth box matched by at least one detector.

    For every ground-truth box, each detector contributes its same-class
    detection with the highest IoU above the threshold; detectors with no
    such detection get a zero row. Unmatched detections are ignored.
    """
    n_det = bundle.num_detectors
    dets_by_image = bundle.detections_by_image()
    gt_by_image = bundle.ground_truth_by_image()
    pairs = []
    for image_id in image_ids:
        if image_id not in dets_by_image:
            raise ValidationError(f"unknown image_id {image_id!r}")
        im = bundle.image(image_id)
        scale = np.array([im.width, im.height, im.width, im.height], dtype=float)
        dets = dets_by_image[image_id]
        for gt in gt_by_image[image_id]:
            per_detector: dict[int, list[tuple[float, Detection]]] = {}
            for det in dets:
                if det.class_id != gt.class_id:
                    continue
                overlap = iou(det.box, gt.box)
                if overlap > iou_threshold:
                    per_detector.setdefault(det.detector_id, []).append((overlap, det))
            if not per_detector:
                continue
            boxes = np.zeros((n_det, 4))
            scores = np.zeros(n_det)
            for det_id, cands in per_detector.items():
                best = _best_match(cands)
                boxes[det_id] = np.asarray(best.box.as_tuple()) / scale
                scores[det_id] = best.score
            present = np.zeros(n_det, dtype=bool)
            present[list(per_detector)] = True
            pairs.append(TrainingPair(
                X=boxes * scores[:, None],
                g=np.asarray(gt.box.as_tuple()) / scale,
                scores=scores,
                present=present,
            ))
    return pairs


def stack_pairs(pairs: Sequence[TrainingPair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(n, D, 4) X, (n, D) scores, (n, 4) targets."""
    X = np.stack([p.X for p in pairs]).astype(float)
    S = np.stack([p.scores for p in pairs]).astype(float)
    G = np.stack([p.g for p in pairs]).astype(float)
    return X, S, G


def predict(pairs: Sequence[TrainingPair], w: np.ndarray | WeightVector,
            rule: CoordinateRule = "normalized") -> np.ndarray:
    """(n, 4) predicted normalised boxes."""
    X, S, _ = stack_pairs(pairs)
    return _predict_arrays(X, S, _weights(w), rule)


def _weights(w: np.ndarray | WeightVector) -> np.ndarray:
    return w.as_array() if isinstance(w, WeightVector) else np.asarray(w, dtype=float)


def _predict_arrays(X: np.ndarray, S: np.ndarray, w: np.ndarray, rule: str) -> np.ndarray:
    num = np.einsum("j,njd->nd", w, X)
    if rule == "linear":
        return num
    if rule != "normalized":
        raise ValidationError(f"unknown prediction rule {rule!r}")
    den = S @ w
    bad = np.flatnonzero(np.abs(den) <= DENOMINATOR_EPS)
    if bad.size:
        raise NumericalError(
            f"degenerate normalisation for training pair {int(bad[0])} (sum s*w = {den[bad[0]]:.3g})")
    return num / den[:, None]


def mse(pairs: Sequence[TrainingPair], w: np.ndarray | WeightVector,
        rule: CoordinateRule = "normalized") -> float:
    """Mean squared coordinate error, averaged over 4 coordinates and n pairs."""
    if not pairs:
        raise ValidationError("mse of an empty pair list")
    X, S, G = stack_pairs(pairs)
    resid = G - _predict_arrays(X, S, _weights(w), rule)
    return float(np.sum(resid ** 2) / (4 * len(pairs)))


def mse_gradient(pairs: Sequence[TrainingPair], w: np.ndarray | WeightVector,
                 rule: CoordinateRule = "normalized") -> np.ndarray:
    """Analytic gradient of ``mse`` with respect to the weights."""
    X, S, G = stack_pairs(pairs)
    w = _weights(w)
    pred = _predict_arrays(X, S, w, rule)
    resid = pred - G
    n = len(pairs)
    if rule == "linear":
        return 2.0 / (4 * n) * np.einsum("nd,njd->j", resid, X)
    den = S @ w
    # d pred_d / d w_j = (X_jd - pred_d * s_j) / den
    dpred = (X - pred[:, None, :] * S[:, :, None]) / den[:, None, None]
    return 2.0 / (4 * n) * np.einsum("nd,njd->j", resid, dpred)


@numba.njit(cache=True)
def _sgd_epoch(X, S, G, order, w, lr, rule):  # pragma: no cover - compiled
    """In-place per-sample SGD pass. Returns the index of a degenerate pair, or -1."""
    D = w.shape[0]
    grad = np.empty(D)
    pred = np.empty(4)
    for k in range(order.shape[0]):
        i = order[k]
        den = 1.0
        if rule == 1:
            den = 0.0
            for j in range(D):
                den += S[i, j] * w[j]
            if abs(den) <= 1e-9:
                return i
        for d in range(4):
            acc = 0.0
            for j in range(D):
                acc += w[j] * X[i, j, d]
            pred[d] = acc / den
        for j in range(D):
            acc = 0.0
            for d in range(4):
                r = pred[d] - G[i, d]
                if rule == 1:
                    acc += r * (X[i, j, d] - pred[d] * S[i, j]) / den
                else:
                    acc += r * X[i, j, d]
            grad[j] = 0.5 * acc
        for j in range(D):
            w[j] -= lr * grad[j]
    return -1


@numba.njit(cache=True)
def _mse_kernel(X, S, G, idx, w, rule):  # pragma: no cover - compiled
    D = w.shape[0]
    total = 0.0
    for k in range(idx.shape[0]):
        i = idx[k]
        den = 1.0
        if rule == 1:
            den = 0.0
            for j in range(D):
                den += S[i, j] * w[j]
            if abs(den) <= 1e-9:
                return np.nan
        for d in range(4):
            acc = 0.0
            for j in range(D):
                acc += w[j] * X[i, j, d]
            r = acc / den - G[i, d]
            total += r * r
    return total / (4.0 * idx.shape[0])


def split_pairs(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, validation) index split."""
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n - n_val < 1:
        raise ValidationError(
            f"{n} training pairs cannot be split {1 - val_fraction:.0%}/{val_fraction:.0%} "
            "into two non-empty parts")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def initial_weights(n_detectors: int, rule: CoordinateRule) -> np.ndarray:
    # zero makes the normalised prediction 0/0, so that rule starts uniform
    if rule == "linear":
        return np.zeros(n_detectors)
    return np.full(n_detectors, 1.0 / n_detectors)


def train_weights(pairs: Sequence[TrainingPair], config: TrainConfig = TrainConfig(),
                  detector_names: Sequence[str] = ()) -> tuple[WeightVector, TrainReport]:
    """Fit weights by SGD with validation early stopping.

    Returns the weights of the best validation epoch (initial weights count
    as epoch 0) and a report. Deterministic given ``config.rng_seed``.
    """
    if not pairs:
        raise ValidationError("no training pairs")
    X, S, G = stack_pairs(pairs)
    n, D = S.shape
    if detector_names and len(detector_names) != D:
        raise ValidationError(f"{len(detector_names)} detector names for D={D}")
    train_idx, val_idx = split_pairs(n, config.val_fraction, config.rng_seed)
    rule = _NORMALIZED if config.prediction_rule == "normalized" else _LINEAR
    rng = np.random.default_rng([config.rng_seed, 1])

    w = initial_weights(D, config.prediction_rule)
    best_w = w.copy()
    best_val = _mse_kernel(X, S, G, val_idx, w, rule)
    if not np.isfinite(best_val):
        raise NumericalError("validation loss undefined at the initial weights")
    stale = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = train_idx[rng.permutation(train_idx.shape[0])]
        bad = _sgd_epoch(X, S, G, order, w, config.learning_rate, rule)
        if bad >= 0:
            raise NumericalError(
                f"degenerate normalisation on training pair {bad} at epoch {epoch}; "
                "try a smaller learning rate")
        val = _mse_kernel(X, S, G, val_idx, w, rule)
        if not (np.isfinite(val) and np.all(np.isfinite(w))):
            raise NumericalError(
                f"training diverged at epoch {epoch} (lr={config.learning_rate:g}); "
                "use a smaller learning rate")
        if val < best_val:
            best_val, best_w, stale = val, w.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    train_mse = _mse_kernel(X, S, G, train_idx, best_w, rule)
    log.info("trained %d epochs: best val mse %.6g, train mse %.6g, w=%s",
             epoch, best_val, train_mse, np.round(best_w, 6))
    weights = WeightVector(tuple(best_w), tuple(detector_names), config.prediction_rule)
    report = TrainReport(epochs=epoch, best_val_mse=float(best_val), train_mse=float(train_mse),
                         weights=[float(x) for x in best_w])
    return weights, report
