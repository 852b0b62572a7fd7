"""Axis-aligned boxes in corner convention (x1, y1, x2, y2) and IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

from .errors import ValidationError


@dataclass(frozen=True)
class BoundingBox:
    """Rectangle with (x1, y1) top-left and (x2, y2) bottom-right, in pixels.

    Zero-area boxes are allowed; ``BoundingBox.zero()`` is the fill value used
    for detectors that produced nothing.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValidationError(f"inverted box {coords}: need x1<=x2 and y1<=y2")

    @classmethod
    def zero(cls) -> BoundingBox:
        return cls(0.0, 0.0, 0.0, 0.0)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def __iter__(self) -> Iterator[float]:
        return iter(self.as_tuple())

    def translate(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


def area(b: BoundingBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    # clamp guards against rounding pushing identical boxes past 1
    return min(1.0, inter / union)
