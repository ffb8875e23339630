"""Boxes, grid-to-image coordinate mapping, IoU and greedy NMS.

Feature maps are indexed ``(i, j)``; position ``(i, j)`` on a level with
stride ``s`` sits at image point ``x = s//2 + i*s, y = s//2 + j*s``. The
first map axis therefore runs along image x.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center-size form (image pixels)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self):
        return self.w * self.h

    def contains(self, x, y):
        """Inclusive-border point test."""
        return abs(x - self.cx) <= self.w / 2 and abs(y - self.cy) <= self.h / 2


@dataclass(frozen=True, order=True)
class GridPos:
    level: int
    i: int
    j: int


def grid_to_image_coords(pos, stride):
    s = int(stride)
    if s < 1:
        raise ContractError(f"stride must be a positive integer, got {stride}")
    half = s // 2
    return (half + pos.i * s, half + pos.j * s)


def grid_axis_coords(n, stride):
    """Image coordinates of the ``n`` grid points along one axis."""
    return stride // 2 + np.arange(n, dtype=np.float64) * stride


def iou(a, b):
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def corners_array(boxes):
    return np.array([b.corners for b in boxes], dtype=np.float64).reshape(-1, 4)


def nms(boxes, scores, iou_threshold):
    """Greedy NMS; returns kept indices sorted by descending score.

    Equal scores are ordered by original index. A box is dropped when its
    IoU with a kept box exceeds ``iou_threshold`` (strictly).
    """
    if len(boxes) != len(scores):
        raise ContractError(f"{len(boxes)} boxes but {len(scores)} scores")
    keep = kernels.nms(corners_array(boxes), np.asarray(scores, dtype=np.float64), iou_threshold)
    return [int(k) for k in keep]


def unit_box(pos):
    """Box of half-size 1 around grid index (i, j), in index units."""
    return BBox.from_corners(pos.i - 1, pos.j - 1, pos.i + 1, pos.j + 1)
