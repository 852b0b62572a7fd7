"""Tracking-based refinement of per-frame detections in a video.

Stage 1 runs one box tracker per object. When a tracklet that went unmatched
for a few frames is matched again, the boxes it predicted during the gap are
inserted as recovered detections. Tracklets die early if they were only
briefly matched and then lost, or if they stay unmatched for too long; a dead
tracklet's buffered predictions are dropped.

Stage 2 links detections frame to frame by IoU and removes every sequence
shorter than ``min_track_length`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Protocol, Sequence

from .dataset import DatasetBundle, Detection
from .errors import ValidationError
from .geometry import BoundingBox, iou


class TrackerBehavior(Protocol):
    def initialize(self, box: BoundingBox) -> None: ...

    def predict(self) -> BoundingBox: ...

    def correct(self, box: BoundingBox) -> None: ...


TrackerFactory = Callable[[], TrackerBehavior]


class ConstantVelocityTracker:
    """Box-space tracker with an exponentially smoothed per-coordinate velocity.

    ``predict`` advances the box by one frame of velocity. ``correct`` turns
    the displacement since the last correction into a per-frame velocity
    (divided by the number of frames predicted in between) and blends it in.
    """

    def __init__(self, smoothing: float = 0.5):
        self.smoothing = smoothing
        self.box: BoundingBox | None = None
        self.anchor: BoundingBox | None = None
        self.velocity = (0.0, 0.0, 0.0, 0.0)
        self.steps = 0

    def initialize(self, box: BoundingBox) -> None:
        self.box = self.anchor = box
        self.velocity = (0.0, 0.0, 0.0, 0.0)
        self.steps = 0

    def predict(self) -> BoundingBox:
        if self.box is None:
            raise RuntimeError("tracker used before initialize()")
        # apply as a translation of each corner independently
        vx1, vy1, vx2, vy2 = self.velocity
        b = self.box
        x1, y1, x2, y2 = b.x1 + vx1, b.y1 + vy1, b.x2 + vx2, b.y2 + vy2
        if x1 > x2:
            x1 = x2 = (x1 + x2) / 2
        if y1 > y2:
            y1 = y2 = (y1 + y2) / 2
        self.box = BoundingBox(x1, y1, x2, y2)
        self.steps += 1
        return self.box

    def correct(self, box: BoundingBox) -> None:
        if self.anchor is None:
            self.initialize(box)
            return
        frames = max(1, self.steps)
        a = self.smoothing
        disp = [(new - old) / frames for new, old in zip(box.as_tuple(), self.anchor.as_tuple())]
        self.velocity = tuple(a * v + (1 - a) * d for v, d in zip(self.velocity, disp))
        self.box = self.anchor = box
        self.steps = 0


def default_box_tracker() -> ConstantVelocityTracker:
    return ConstantVelocityTracker(smoothing=0.5)


@dataclass(frozen=True)
class RefineConfig:
    match_iou: float = 0.5
    young_match_iou: float = 0.4
    young_age_frames: int = 3
    min_matched_frames: int = 5
    max_miss_young: int = 5
    max_miss: int = 50
    min_track_length: int = 5
    recovered_score_policy: Literal["last_matched", "fixed"] = "last_matched"
    recovered_score: float = 0.5
    # "total": all matched frames count toward the short-track death rule;
    # "consecutive": only the most recent run of matches does
    matched_count_mode: Literal["total", "consecutive"] = "total"

    def __post_init__(self) -> None:
        if not self.young_match_iou < self.match_iou:
            raise ValidationError("young_match_iou must be below match_iou")
        counts = (self.young_age_frames, self.min_matched_frames, self.max_miss_young,
                  self.max_miss, self.min_track_length)
        if any(c < 1 for c in counts):
            raise ValidationError("refinement frame counts must be positive")
        if self.recovered_score_policy not in ("last_matched", "fixed"):
            raise ValidationError(f"unknown recovered_score_policy {self.recovered_score_policy!r}")
        if not 0.0 <= self.recovered_score <= 1.0:
            raise ValidationError("recovered_score must be in [0, 1]")
        if self.matched_count_mode not in ("total", "consecutive"):
            raise ValidationError(f"unknown matched_count_mode {self.matched_count_mode!r}")


@dataclass
class Frame:
    index: int
    image_id: str
    detections: list[Detection] = field(default_factory=list)


@dataclass
class Tracklet:
    id: int
    class_id: int
    tracker: TrackerBehavior
    last_detection: Detection
    matched_frames: int = 1
    matched_run: int = 1
    consecutive_misses: int = 0
    age_frames: int = 0
    gap_buffer: list[tuple[int, BoundingBox]] = field(default_factory=list)
    prediction: BoundingBox | None = None

    @property
    def last_matched_score(self) -> float:
        return self.last_detection.score


def _check_consecutive(frames: Sequence[Frame]) -> None:
    for prev, cur in zip(frames, frames[1:]):
        if cur.index != prev.index + 1:
            raise ValidationError(
                f"frame indices must be consecutive: {prev.index} followed by {cur.index}")


def greedy_match(boxes_a: Sequence[tuple[int, BoundingBox, float]],
                 boxes_b: Sequence[tuple[int, BoundingBox]]) -> list[tuple[int, int]]:
    """Greedy descending-IoU assignment.

    ``boxes_a`` holds (class_id, box, threshold), ``boxes_b`` (class_id, box).
    A pair qualifies when classes agree and IoU strictly exceeds the
    threshold of the ``a`` side. Ties break on lower (a, b) indices.
    """
    cands = []
    for ia, (ca, ba, thr) in enumerate(boxes_a):
        for ib, (cb, bb) in enumerate(boxes_b):
            if ca != cb:
                continue
            overlap = iou(ba, bb)
            if overlap > thr:
                cands.append((-overlap, ia, ib))
    cands.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    out = []
    for _, ia, ib in cands:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        out.append((ia, ib))
    return out


def stage1_fill_gaps(frames: Sequence[Frame], config: RefineConfig = RefineConfig(),
                     tracker_factory: TrackerFactory = default_box_tracker) -> list[Frame]:
    """Insert tracker predictions for frames where a re-matched object was missed."""
    _check_consecutive(frames)
    out = [Frame(f.index, f.image_id, list(f.detections)) for f in frames]
    if not frames:
        return out
    pos = {f.index: k for k, f in enumerate(frames)}
    live: list[Tracklet] = []
    next_id = 0

    def spawn(det: Detection) -> None:
        nonlocal next_id
        tracker = tracker_factory()
        tracker.initialize(det.box)
        live.append(Tracklet(id=next_id, class_id=det.class_id, tracker=tracker, last_detection=det))
        next_id += 1

    for det in frames[0].detections:
        spawn(det)

    for frame in frames[1:]:
        for t in live:
            t.prediction = t.tracker.predict()
            t.age_frames += 1
        tracks_side = [
            (t.class_id, t.prediction,
             config.young_match_iou if t.age_frames <= config.young_age_frames else config.match_iou)
            for t in live
        ]
        dets_side = [(d.class_id, d.box) for d in frame.detections]
        matches = greedy_match(tracks_side, dets_side)
        matched_tracks = {ia for ia, _ in matches}
        matched_dets = {ib for _, ib in matches}

        for ia, ib in matches:
            t, det = live[ia], frame.detections[ib]
            t.tracker.correct(det.box)
            if t.consecutive_misses > 0:
                score = (t.last_matched_score if config.recovered_score_policy == "last_matched"
                         else config.recovered_score)
                for f_idx, box in t.gap_buffer:
                    slot = out[pos[f_idx]]
                    slot.detections.append(replace(
                        t.last_detection, box=box, score=score, image_id=slot.image_id,
                        recovered=True))
                t.gap_buffer.clear()
                t.consecutive_misses = 0
                t.matched_run = 1
            else:
                t.matched_run += 1
            t.matched_frames += 1
            t.last_detection = det

        survivors = []
        for ia, t in enumerate(live):
            if ia not in matched_tracks:
                t.consecutive_misses += 1
                t.gap_buffer.append((frame.index, t.prediction))
                matched = t.matched_frames if config.matched_count_mode == "total" else t.matched_run
                short_lived = (matched <= config.min_matched_frames
                               and t.consecutive_misses > config.max_miss_young)
                if short_lived or t.consecutive_misses > config.max_miss:
                    continue
            survivors.append(t)
        live = survivors
        for ib, det in enumerate(frame.detections):
            if ib not in matched_dets:
                spawn(det)
    return out


def link_sequences(frames: Sequence[Frame], match_iou: float = 0.5) -> list[list[tuple[int, int]]]:
    """Chain detections across consecutive frames.

    Returns sequences as lists of (frame position, detection position). A
    sequence ends as soon as it finds no match in the next frame.
    """
    sequences: list[list[tuple[int, int]]] = []
    open_seqs: list[int] = []  # indices into sequences whose tail is in the previous frame
    for k, frame in enumerate(frames):
        tails = []
        for s in open_seqs:
            fk, di = sequences[s][-1]
            d = frames[fk].detections[di]
            tails.append((d.class_id, d.box, match_iou))
        dets_side = [(d.class_id, d.box) for d in frame.detections]
        matches = greedy_match(tails, dets_side)
        matched_dets = set()
        next_open = []
        for ia, ib in matches:
            s = open_seqs[ia]
            sequences[s].append((k, ib))
            matched_dets.add(ib)
            next_open.append(s)
        for ib in range(len(frame.detections)):
            if ib not in matched_dets:
                sequences.append([(k, ib)])
                next_open.append(len(sequences) - 1)
        open_seqs = sorted(next_open)
    return sequences


def stage2_prune_short_tracks(frames: Sequence[Frame],
                              config: RefineConfig = RefineConfig()) -> list[Frame]:
    """Drop detections belonging to sequences shorter than ``min_track_length`` frames."""
    _check_consecutive(frames)
    drop: set[tuple[int, int]] = set()
    for seq in link_sequences(frames, config.match_iou):
        if len(seq) < config.min_track_length:
            drop.update(seq)
    return [
        Frame(f.index, f.image_id, [d for i, d in enumerate(f.detections) if (k, i) not in drop])
        for k, f in enumerate(frames)
    ]


def refine(frames: Sequence[Frame], config: RefineConfig = RefineConfig(),
           tracker_factory: TrackerFactory = default_box_tracker) -> list[Frame]:
    return stage2_prune_short_tracks(stage1_fill_gaps(frames, config, tracker_factory), config)


def frames_from_bundle(bundle: DatasetBundle) -> list[Frame]:
    by_image = bundle.detections_by_image()
    return [Frame(im.frame_index, im.image_id, list(by_image[im.image_id]))
            for im in bundle.frames()]


def detections_from_frames(frames: Sequence[Frame]) -> list[Detection]:
    return [d for f in frames for d in f.detections]
