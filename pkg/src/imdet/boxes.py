"""Axis-aligned boxes in continuous pixel coordinates.

A box covers [x1, x2) x [y1, y2); areas are plain products, with no legacy
+1 pixel convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ArgumentError


@dataclass(frozen=True)
class BoxF:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ArgumentError(f"box coordinates must be finite, got {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ArgumentError(f"degenerate box: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def clipped(self, width: float, height: float) -> "BoxF | None":
        """Intersect with the image frame; None if nothing is left."""
        x1 = max(self.x1, 0.0)
        y1 = max(self.y1, 0.0)
        x2 = min(self.x2, float(width))
        y2 = min(self.y2, float(height))
        if x1 >= x2 or y1 >= y2:
            return None
        return BoxF(x1, y1, x2, y2)

    def within(self, width: float, height: float) -> bool:
        return 0.0 <= self.x1 and 0.0 <= self.y1 and self.x2 <= width and self.y2 <= height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BoxF, b: BoxF) -> float:
    """Intersection over union; symmetric, in [0, 1]."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union
