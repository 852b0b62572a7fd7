"""Seeded virtual detectors and ground-truth scenes.

A ``DetectorProfile`` describes how a fake detector perturbs ground truth:
corner jitter, miss rate, false positives per image, and a score that drops
with the realised jitter and is shifted by a per-detector bias. All values
are rounded to 6 decimals so that generated bundles survive a save/load
cycle unchanged.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dataset import (DECIMALS, DatasetBundle, Detection, GroundTruthBox, ImageRecord,
                      read_json)
from .errors import ValidationError
from .geometry import BoundingBox, iou

BASE_SCORE = 0.8
JITTER_PENALTY = 2.0
FP_SCORE_RANGE = (0.05, 0.6)
PROFILE_KEYS = ("jitter_sigma", "miss_prob", "fp_rate", "score_bias", "score_noise_sigma")


@dataclass(frozen=True)
class DetectorProfile:
    jitter_sigma: float = 0.05
    miss_prob: float = 0.1
    fp_rate: float = 0.5
    score_bias: float = 0.0
    score_noise_sigma: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValidationError("miss_prob must be in [0, 1]")
        if self.jitter_sigma < 0 or self.score_noise_sigma < 0 or self.fp_rate < 0:
            raise ValidationError("jitter_sigma, score_noise_sigma and fp_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def load_profiles(path: str | os.PathLike) -> list[DetectorProfile]:
    doc = read_json(path)
    if not isinstance(doc, list) or not doc:
        raise ValidationError("profiles file must be a non-empty JSON list")
    out = []
    for i, rec in enumerate(doc):
        if not isinstance(rec, dict) or set(rec) != set(PROFILE_KEYS):
            raise ValidationError(f"profiles[{i}]: keys must be exactly {list(PROFILE_KEYS)}")
        out.append(DetectorProfile(**{k: float(rec[k]) for k in PROFILE_KEYS}))
    return out


def _r(x: float) -> float:
    return round(float(x), DECIMALS) + 0.0


def _box(x1: float, y1: float, x2: float, y2: float) -> BoundingBox:
    return BoundingBox(_r(x1), _r(y1), _r(x2), _r(y2))


def _jittered(gt: BoundingBox, sigma: float, im: ImageRecord,
              rng: np.random.Generator) -> tuple[BoundingBox, float]:
    size = np.array([gt.width, gt.height, gt.width, gt.height])
    rel = rng.normal(0.0, sigma, 4) if sigma > 0 else np.zeros(4)
    x1, y1, x2, y2 = np.asarray(gt.as_tuple()) + rel * size
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    x1, x2 = np.clip([x1, x2], 0, im.width)
    y1, y2 = np.clip([y1, y2], 0, im.height)
    magnitude = float(np.sqrt(np.mean(rel ** 2)))
    return _box(x1, y1, x2, y2), magnitude


def generate(gt_bundle: DatasetBundle, profiles: Sequence[DetectorProfile], seed: int = 0,
             detector_names: Sequence[str] | None = None) -> DatasetBundle:
    """Virtual detections for every image of ``gt_bundle``.

    Each (detector, image) pair draws from its own seeded stream, so the
    output does not depend on processing order.
    """
    if not profiles:
        raise ValidationError("need at least one detector profile")
    names = list(detector_names) if detector_names else [f"det{j}" for j in range(len(profiles))]
    if len(names) != len(profiles):
        raise ValidationError("one detector name per profile")
    n_classes = max(1, len(gt_bundle.class_names))
    gt_by_image = gt_bundle.ground_truth_by_image()
    detections = []
    for j, prof in enumerate(profiles):
        for k, im in enumerate(gt_bundle.images):
            rng = np.random.default_rng([seed, j, k])
            for gt in gt_by_image[im.image_id]:
                if rng.random() < prof.miss_prob:
                    continue
                box, magnitude = _jittered(gt.box, prof.jitter_sigma, im, rng)
                noise = rng.normal(0.0, prof.score_noise_sigma) if prof.score_noise_sigma > 0 else 0.0
                score = BASE_SCORE - JITTER_PENALTY * magnitude + prof.score_bias + noise
                detections.append(Detection(box=box, class_id=gt.class_id,
                                            score=_r(np.clip(score, 0.0, 1.0)),
                                            detector_id=j, image_id=im.image_id))
            for _ in range(rng.poisson(prof.fp_rate) if prof.fp_rate > 0 else 0):
                bw = rng.uniform(0.05, 0.3) * im.width
                bh = rng.uniform(0.05, 0.3) * im.height
                x1 = rng.uniform(0, im.width - bw)
                y1 = rng.uniform(0, im.height - bh)
                detections.append(Detection(box=_box(x1, y1, x1 + bw, y1 + bh),
                                            class_id=int(rng.integers(n_classes)),
                                            score=_r(rng.uniform(*FP_SCORE_RANGE)),
                                            detector_id=j, image_id=im.image_id))
    return DatasetBundle(images=list(gt_bundle.images), detections=detections,
                         ground_truth=list(gt_bundle.ground_truth), detector_names=names,
                         class_names=list(gt_bundle.class_names))


def make_scene(n_images: int, seed: int = 0, n_classes: int = 3, width: int = 640,
               height: int = 480, max_objects: int = 5) -> DatasetBundle:
    """Ground-truth-only image dataset with 1..max_objects random boxes per image."""
    rng = np.random.default_rng([seed, 7919])
    images, gts = [], []
    for k in range(n_images):
        image_id = f"img{k:05d}"
        images.append(ImageRecord(image_id, width, height))
        for _ in range(int(rng.integers(1, max_objects + 1))):
            bw = rng.uniform(0.1, 0.4) * width
            bh = rng.uniform(0.1, 0.4) * height
            x1 = rng.uniform(0, width - bw)
            y1 = rng.uniform(0, height - bh)
            gts.append(GroundTruthBox(_box(x1, y1, x1 + bw, y1 + bh),
                                      int(rng.integers(n_classes)), image_id))
    return DatasetBundle(images=images, ground_truth=gts,
                         class_names=[f"class{c}" for c in range(n_classes)])


def _reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def make_video(n_frames: int, seed: int = 0, n_objects: int = 4, width: int = 640,
               height: int = 480, max_speed: float = 3.0, min_lifetime: int = 30) -> DatasetBundle:
    """Single-class video: constant-velocity boxes bouncing off the frame borders.

    Each object is visible for one contiguous interval of at least
    ``min_lifetime`` frames (or the whole video if shorter).
    """
    rng = np.random.default_rng([seed, 104729])
    images = [ImageRecord(f"frame{f:05d}", width, height, frame_index=f) for f in range(n_frames)]
    gts = []
    for _ in range(n_objects):
        bw = rng.uniform(0.08, 0.18) * width
        bh = rng.uniform(0.2, 0.4) * height
        x, y = rng.uniform(0, width - bw), rng.uniform(0, height - bh)
        vx, vy = rng.uniform(-max_speed, max_speed, 2)
        life = min(n_frames, int(rng.integers(min_lifetime, max(min_lifetime, n_frames) + 1)))
        start = int(rng.integers(0, n_frames - life + 1))
        for f in range(n_frames):
            if start <= f < start + life:
                gts.append(GroundTruthBox(_box(x, y, x + bw, y + bh), 0, images[f].image_id))
            x, vx = _reflect(x + vx, vx, 0, width - bw)
            y, vy = _reflect(y + vy, vy, 0, height - bh)
    return DatasetBundle(images=images, ground_truth=gts, class_names=["person"])


def inject_dropouts(bundle: DatasetBundle, seed: int = 0, rate: float = 0.03,
                    max_len: int = 3, overlap: float = 0.3) -> DatasetBundle:
    """Remove every detector's detections of an object for 1..max_len frames.

    Each ground-truth box starts a dropout with probability ``rate``; the
    object is followed into later frames through its best-overlapping
    same-class ground-truth box. Detections with IoU above ``overlap`` to the
    object are deleted in the affected frames.
    """
    rng = np.random.default_rng([seed, 15485863])
    frames = bundle.frames()
    gt_by_image = bundle.ground_truth_by_image()
    dropped: dict[str, list[GroundTruthBox]] = {}
    for k, im in enumerate(frames):
        for gt in gt_by_image[im.image_id]:
            if rng.random() >= rate:
                continue
            length = int(rng.integers(1, max_len + 1))
            cur = gt
            for f in range(k, min(k + length, len(frames))):
                if f > k:
                    nxt = [g for g in gt_by_image[frames[f].image_id] if g.class_id == cur.class_id]
                    if not nxt:
                        break
                    best = max(nxt, key=lambda g: iou(g.box, cur.box))
                    if iou(best.box, cur.box) <= 0.5:
                        break
                    cur = best
                dropped.setdefault(frames[f].image_id, []).append(cur)
    kept = [d for d in bundle.detections
            if not any(g.class_id == d.class_id and iou(g.box, d.box) > overlap
                       for g in dropped.get(d.image_id, ()))]
    return bundle.with_detections(kept)
