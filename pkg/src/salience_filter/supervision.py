"""Salience targets, the discrete foreground baseline, and the focal loss."""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ConfigurationError, ContractError
from .geometry import grid_axis_coords

# Overlap-limited object-size range per pyramid level, fine to coarse.
FOCUS_SCALE_INTERVALS = ((-1.0, 128.0), (64.0, 256.0), (128.0, 512.0), (256.0, math.inf))


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    weight: float = 2.0
    eps: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0 or self.eps <= 0:
            raise ConfigurationError("gamma must be >= 0 and eps > 0")


def salience_confidence(point, box):
    """Relative-distance confidence of an image point w.r.t. one box.

    1 at the center, 0 at the corners, and 0 outside the box. Border points
    count as inside.
    """
    x, y = point
    dx = x - box.cx
    dy = y - box.cy
    if abs(dx) > box.w / 2.0 or abs(dy) > box.h / 2.0:
        return 0.0
    nx = dx / box.w
    ny = dy / box.h
    return max(1.0 - math.sqrt(2.0 * nx * nx + 2.0 * ny * ny), 0.0)


def _box_array(boxes):
    return np.array([(b.cx, b.cy, b.w, b.h) for b in boxes], dtype=np.float64).reshape(-1, 4)


def build_salience_targets(shapes, strides, boxes):
    """Per-level maps of the max salience confidence over ``boxes``."""
    if len(shapes) != len(strides):
        raise ConfigurationError(f"{len(shapes)} level shapes but {len(strides)} strides")
    arr = _box_array(boxes)
    maps = []
    for (h, w), s in zip(shapes, strides):
        maps.append(kernels.salience_map(grid_axis_coords(h, s), grid_axis_coords(w, s), arr))
    return maps


def discrete_fg_targets(shapes, strides, boxes, scale_intervals=FOCUS_SCALE_INTERVALS):
    """Binary foreground maps; a box labels level l only if its longer side
    falls inside that level's size interval (inclusive)."""
    if len(scale_intervals) != len(shapes):
        raise ConfigurationError(f"{len(scale_intervals)} scale intervals for {len(shapes)} levels")
    if len(shapes) != len(strides):
        raise ConfigurationError(f"{len(shapes)} level shapes but {len(strides)} strides")
    maps = []
    for (h, w), s, (lo, hi) in zip(shapes, strides, scale_intervals):
        xs = grid_axis_coords(h, s)[:, None]
        ys = grid_axis_coords(w, s)[None, :]
        m = np.zeros((h, w))
        for b in boxes:
            if lo <= max(b.w, b.h) <= hi:
                inside = (np.abs(xs - b.cx) <= b.w / 2.0) & (np.abs(ys - b.cy) <= b.h / 2.0)
                m[inside] = 1.0
        maps.append(m)
    return maps


def salience_focal_loss(preds, targets, params=FocalParams()):
    """Mean focal term over every position of every level.

    ``preds`` are probability maps (Tensors, post-sigmoid); ``targets`` are
    arrays of the same shapes. Returns the unweighted loss; the caller
    applies ``params.weight``.
    """
    if len(preds) != len(targets):
        raise ContractError(f"{len(preds)} prediction maps for {len(targets)} target maps")
    flat_p, flat_t = [], []
    for p, t in zip(preds, targets):
        p = T.as_tensor(p)
        t = np.asarray(t, dtype=np.float64)
        if p.shape != t.shape:
            raise ContractError(f"prediction shape {p.shape} != target shape {t.shape}")
        flat_p.append(p.reshape(-1))
        flat_t.append(t.reshape(-1))
    pred = T.concat(flat_p) if len(flat_p) > 1 else flat_p[0]
    tgt = np.concatenate(flat_t)

    pf = pred * tgt + (1.0 - pred) * (1.0 - tgt)
    pf = T.clip(pf, params.eps, 1.0)
    term = (1.0 - pf) ** params.gamma * T.log(pf)
    return T.mean(term) * (-params.alpha)
