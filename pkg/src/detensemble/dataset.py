"""Detection / ground-truth records and the canonical JSON bundle format.

A bundle file holds everything for one dataset (or one video) in a single
document so that all detectors' outputs are co-registered by ``image_id``::

    {
      "detector_names": ["ssd", "yolo"],
      "class_names": ["person"],
      "images": [{"image_id": "0001", "width": 640, "height": 480, "frame_index": null}],
      "detections": [{"image_id": "0001", "detector_id": 0, "class_id": 0,
                      "score": 0.91, "bbox": [x1, y1, x2, y2]}],
      "ground_truth": [{"image_id": "0001", "class_id": 0, "bbox": [x1, y1, x2, y2]}]
    }

Detections may carry ``"recovered": true`` when they were inserted by the
video refinement; the key is omitted otherwise.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import StorageError, ValidationError
from .geometry import BoundingBox, area

TOP_LEVEL_KEYS = ("detector_names", "class_names", "images", "detections", "ground_truth")
DECIMALS = 6


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float
    detector_id: int
    image_id: str
    recovered: bool = False

    def with_box(self, box: BoundingBox) -> Detection:
        return replace(self, box=box)


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoundingBox
    class_id: int
    image_id: str


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    frame_index: int | None = None


@dataclass
class DatasetBundle:
    images: list[ImageRecord] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)
    ground_truth: list[GroundTruthBox] = field(default_factory=list)
    detector_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    @property
    def num_detectors(self) -> int:
        return len(self.detector_names)

    def image(self, image_id: str) -> ImageRecord:
        return self._image_index()[image_id]

    def _image_index(self) -> dict[str, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def detections_by_image(self) -> dict[str, list[Detection]]:
        """Detections grouped per image, every image present (possibly empty)."""
        out: dict[str, list[Detection]] = {im.image_id: [] for im in self.images}
        for det in self.detections:
            out[det.image_id].append(det)
        return out

    def ground_truth_by_image(self) -> dict[str, list[GroundTruthBox]]:
        out: dict[str, list[GroundTruthBox]] = {im.image_id: [] for im in self.images}
        for gt in self.ground_truth:
            out[gt.image_id].append(gt)
        return out

    def frames(self) -> list[ImageRecord]:
        """Images ordered by frame index; all images must carry one."""
        if any(im.frame_index is None for im in self.images):
            raise ValidationError("bundle is not a video: some images lack frame_index")
        return sorted(self.images, key=lambda im: im.frame_index)

    def subset(self, image_ids: Iterable[str]) -> DatasetBundle:
        keep = set(image_ids)
        return DatasetBundle(
            images=[im for im in self.images if im.image_id in keep],
            detections=[d for d in self.detections if d.image_id in keep],
            ground_truth=[g for g in self.ground_truth if g.image_id in keep],
            detector_names=list(self.detector_names),
            class_names=list(self.class_names),
        )

    def with_detections(self, detections: Sequence[Detection],
                        detector_names: Sequence[str] | None = None) -> DatasetBundle:
        return DatasetBundle(
            images=list(self.images),
            detections=list(detections),
            ground_truth=list(self.ground_truth),
            detector_names=list(detector_names if detector_names is not None else self.detector_names),
            class_names=list(self.class_names),
        )

    def validate(self) -> None:
        validate_bundle(self)


def from_xywh(x: float, y: float, w: float, h: float) -> BoundingBox:
    """Convert a top-left + width/height box into corner convention."""
    if w < 0 or h < 0:
        raise ValidationError(f"negative width/height ({w}, {h})")
    return BoundingBox(x, y, x + w, y + h)


def canonical_detection_order(detections: Iterable[Detection]) -> list[Detection]:
    """Sort by (image_id, detector_id, descending score); stable otherwise."""
    return sorted(detections, key=lambda d: (d.image_id, d.detector_id, -d.score))


def validate_bundle(bundle: DatasetBundle) -> None:
    """Raise ValidationError naming the first offending record."""
    seen: set[str] = set()
    frame_indices: list[int] = []
    for i, im in enumerate(bundle.images):
        where = f"images[{i}] ({im.image_id!r})"
        if im.image_id in seen:
            raise ValidationError(f"{where}: duplicate image_id")
        seen.add(im.image_id)
        if im.width <= 0 or im.height <= 0:
            raise ValidationError(f"{where}: width and height must be positive")
        if im.frame_index is not None:
            frame_indices.append(im.frame_index)
    if frame_indices:
        if len(frame_indices) != len(bundle.images):
            raise ValidationError("images: frame_index must be set on all images or none")
        ordered = sorted(frame_indices)
        if len(set(ordered)) != len(ordered):
            raise ValidationError("images: duplicate frame_index")
        if ordered[-1] - ordered[0] != len(ordered) - 1:
            raise ValidationError("images: frame_index values are not consecutive")

    n_det, n_cls = len(bundle.detector_names), len(bundle.class_names)
    for i, d in enumerate(bundle.detections):
        where = f"detections[{i}] (image {d.image_id!r})"
        if d.image_id not in seen:
            raise ValidationError(f"{where}: unknown image_id")
        if not 0 <= d.detector_id < n_det:
            raise ValidationError(f"{where}: detector_id {d.detector_id} outside [0, {n_det})")
        if not 0 <= d.class_id < n_cls:
            raise ValidationError(f"{where}: class_id {d.class_id} outside [0, {n_cls})")
        if not (math.isfinite(d.score) and 0.0 <= d.score <= 1.0):
            raise ValidationError(f"{where}: score {d.score} outside [0, 1]")
    for i, g in enumerate(bundle.ground_truth):
        where = f"ground_truth[{i}] (image {g.image_id!r})"
        if g.image_id not in seen:
            raise ValidationError(f"{where}: unknown image_id")
        if not 0 <= g.class_id < n_cls:
            raise ValidationError(f"{where}: class_id {g.class_id} outside [0, {n_cls})")
        if area(g.box) <= 0:
            raise ValidationError(f"{where}: ground-truth box has zero area")


# -- serialisation ----------------------------------------------------------

def _num(x: float) -> float:
    # +0.0 folds -0.0 into 0.0 so equal values always print the same
    return round(float(x), DECIMALS) + 0.0


def _box_out(b: BoundingBox) -> list[float]:
    return [_num(c) for c in b.as_tuple()]


def bundle_to_dict(bundle: DatasetBundle) -> dict[str, Any]:
    dets = []
    for d in canonical_detection_order(bundle.detections):
        rec: dict[str, Any] = {
            "image_id": d.image_id,
            "detector_id": d.detector_id,
            "class_id": d.class_id,
            "score": _num(d.score),
            "bbox": _box_out(d.box),
        }
        if d.recovered:
            rec["recovered"] = True
        dets.append(rec)
    return {
        "detector_names": list(bundle.detector_names),
        "class_names": list(bundle.class_names),
        "images": [
            {"image_id": im.image_id, "width": im.width, "height": im.height,
             "frame_index": im.frame_index}
            for im in bundle.images
        ],
        "detections": dets,
        "ground_truth": [
            {"image_id": g.image_id, "class_id": g.class_id, "bbox": _box_out(g.box)}
            for g in bundle.ground_truth
        ],
    }


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def save_bundle(bundle: DatasetBundle, path: str | os.PathLike) -> None:
    validate_bundle(bundle)
    atomic_write_text(path, dumps_json(bundle_to_dict(bundle)))


def read_json(path: str | os.PathLike) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON: {exc}") from exc


def _req(rec: dict, key: str, types: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(rec, dict) or key not in rec:
        raise ValidationError(f"{where}: missing field {key!r}")
    val = rec[key]
    # bool is an int subclass; never accept it for numeric fields
    if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ValidationError(f"{where}: field {key!r} has wrong type")
    if not isinstance(val, types):
        raise ValidationError(f"{where}: field {key!r} has wrong type")
    return val


def _box_in(rec: dict, where: str) -> BoundingBox:
    raw = _req(rec, "bbox", list, where)
    if len(raw) != 4 or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in raw):
        raise ValidationError(f"{where}: bbox must be 4 numbers")
    try:
        return BoundingBox(*(float(c) for c in raw))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def bundle_from_dict(doc: Any) -> DatasetBundle:
    if not isinstance(doc, dict):
        raise ValidationError("bundle document must be a JSON object")
    keys = set(doc)
    if keys != set(TOP_LEVEL_KEYS):
        raise ValidationError(
            f"bundle keys must be exactly {list(TOP_LEVEL_KEYS)}, got {sorted(keys)}")
    for key in TOP_LEVEL_KEYS:
        if not isinstance(doc[key], list):
            raise ValidationError(f"{key} must be a list")
    for key in ("detector_names", "class_names"):
        if not all(isinstance(n, str) for n in doc[key]):
            raise ValidationError(f"{key} must contain strings")

    images = []
    for i, rec in enumerate(doc["images"]):
        where = f"images[{i}]"
        fi = rec.get("frame_index") if isinstance(rec, dict) else None
        if fi is not None and (not isinstance(fi, int) or isinstance(fi, bool)):
            raise ValidationError(f"{where}: frame_index must be int or null")
        images.append(ImageRecord(
            image_id=_req(rec, "image_id", str, where),
            width=_req(rec, "width", int, where),
            height=_req(rec, "height", int, where),
            frame_index=fi,
        ))
    detections = []
    for i, rec in enumerate(doc["detections"]):
        where = f"detections[{i}]"
        recovered = rec.get("recovered", False) if isinstance(rec, dict) else False
        if not isinstance(recovered, bool):
            raise ValidationError(f"{where}: recovered must be boolean")
        detections.append(Detection(
            box=_box_in(rec, where),
            class_id=_req(rec, "class_id", int, where),
            score=float(_req(rec, "score", (int, float), where)),
            detector_id=_req(rec, "detector_id", int, where),
            image_id=_req(rec, "image_id", str, where),
            recovered=recovered,
        ))
    ground_truth = []
    for i, rec in enumerate(doc["ground_truth"]):
        where = f"ground_truth[{i}]"
        ground_truth.append(GroundTruthBox(
            box=_box_in(rec, where),
            class_id=_req(rec, "class_id", int, where),
            image_id=_req(rec, "image_id", str, where),
        ))
    bundle = DatasetBundle(
        images=images,
        detections=detections,
        ground_truth=ground_truth,
        detector_names=list(doc["detector_names"]),
        class_names=list(doc["class_names"]),
    )
    validate_bundle(bundle)
    return bundle


def load_bundle(path: str | os.PathLike) -> DatasetBundle:
    """Load and validate a bundle; invalid records abort the load."""
    return bundle_from_dict(read_json(path))
