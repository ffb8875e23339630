"""Query refinement: background embeddings, cross-level token fusion, and
redundancy removal for two-stage query initialization."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .geometry import BBox, grid_to_image_coords, nms, unit_box

RELATIVE = "relative"
ABSOLUTE = "absolute"


# background embedding ----------------------------------------------------

@dataclass
class BackgroundEmbedding:
    """Learned row/column tables ``r, c`` of shape n x m."""

    r: T.Tensor
    c: T.Tensor
    variant: str = ABSOLUTE

    def __post_init__(self):
        if self.variant not in (RELATIVE, ABSOLUTE):
            raise ConfigurationError(f"unknown embedding variant {self.variant!r}")
        if self.r.shape != self.c.shape or self.r.ndim != 2:
            raise ConfigurationError(f"row/column tables must share an n x m shape, got {self.r.shape}, {self.c.shape}")

    @classmethod
    def init(cls, n, channels, variant=ABSOLUTE, rng=None, scale=0.1):
        rng = np.random.default_rng(0) if rng is None else rng
        if variant == ABSOLUTE:
            if channels % 2:
                raise ConfigurationError("absolute embedding needs an even channel count")
            m = channels // 2
        else:
            m = channels
        return cls(T.parameter(rng.normal(0.0, scale, (n, m))),
                   T.parameter(rng.normal(0.0, scale, (n, m))), variant)

    @property
    def n(self):
        return self.r.shape[0]

    @property
    def channels(self):
        m = self.r.shape[1]
        return 2 * m if self.variant == ABSOLUTE else m

    def parameters(self):
        return [self.r, self.c]


def relative_background_embedding(emb, h, w):
    """Per-channel outer product of the row and column tables, resized to h x w."""
    if emb.variant != RELATIVE:
        raise ContractError("relative_background_embedding needs the relative variant")
    n, m = emb.r.shape
    outer = emb.r.T.reshape(m, n, 1) * emb.c.T.reshape(m, 1, n)
    return T.bilinear_resize(outer, h, w)


def absolute_background_embedding(emb, pos):
    """Concatenation of row ``pos.i`` of ``r`` and row ``pos.j`` of ``c``."""
    if emb.variant != ABSOLUTE:
        raise ContractError("absolute_background_embedding needs the absolute variant")
    if not (0 <= pos.i < emb.n and 0 <= pos.j < emb.n):
        raise ContractError(f"position ({pos.i}, {pos.j}) outside an embedding table of {emb.n} rows")
    return T.concat([T.take_rows(emb.r, [pos.i]).reshape(-1), T.take_rows(emb.c, [pos.j]).reshape(-1)])


def absolute_embedding_map(emb, h, w):
    """C x h x w assembly of the absolute embedding over a whole level."""
    if emb.variant != ABSOLUTE:
        raise ContractError("absolute_embedding_map needs the absolute variant")
    if max(h, w) > emb.n:
        raise ContractError(f"level {h}x{w} needs at least {max(h, w)} table rows, have {emb.n}")
    m = emb.r.shape[1]
    rows = T.take_rows(emb.r, np.arange(h)).T.reshape(m, h, 1)
    cols = T.take_rows(emb.c, np.arange(w)).T.reshape(m, 1, w)
    return T.concat([T.broadcast_to(rows, (m, h, w)), T.broadcast_to(cols, (m, h, w))], axis=0)


def embedding_map(emb, h, w):
    if emb.variant == RELATIVE:
        return relative_background_embedding(emb, h, w)
    return absolute_embedding_map(emb, h, w)


def embedding_rows(emb, shapes):
    """Embeddings for every query of the flattened pyramid, (sum H*W) x C."""
    parts = []
    for h, w in shapes:
        b = embedding_map(emb, h, w)
        parts.append(b.reshape(b.shape[0], h * w).T)
    return T.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def apply_background_embedding(queries, plan, rows):
    """Add ``rows`` to queries outside the final layer's selection.

    Selected queries are returned bitwise unchanged.
    """
    queries = T.as_tensor(queries)
    n = queries.shape[0]
    if plan.num_layers:
        selected = plan.omega(plan.num_layers - 1)
    else:
        selected = np.zeros(0, np.int64)
    mask = np.ones(n, dtype=bool)
    mask[selected] = False
    rest = np.flatnonzero(mask)
    if rest.size == 0:
        return queries
    shifted = T.take_rows(queries, rest) + T.take_rows(rows, rest)
    return T.index_update(queries, rest, shifted)


# cross-level token fusion ------------------------------------------------

@dataclass
class BlockParams:
    k3: T.Tensor
    scale3: T.Tensor
    shift3: T.Tensor
    k1: T.Tensor
    scale1: T.Tensor
    shift1: T.Tensor
    alpha: T.Tensor
    fc1_w: T.Tensor
    fc1_b: T.Tensor
    fc2_w: T.Tensor
    fc2_b: T.Tensor
    groups: int = 8

    @classmethod
    def init(cls, channels, groups=8, reduction=4, rng=None, alpha=0.5):
        if channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible by {groups} groups")
        rng = np.random.default_rng(0) if rng is None else rng
        cg = channels // groups
        hidden = max(1, channels // reduction)
        return cls(
            k3=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(9 * cg), (channels, cg, 3, 3))),
            scale3=T.parameter(np.ones(channels)),
            shift3=T.parameter(np.zeros(channels)),
            k1=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(cg), (channels, cg, 1, 1))),
            scale1=T.parameter(np.ones(channels)),
            shift1=T.parameter(np.zeros(channels)),
            alpha=T.parameter(np.array([alpha])),
            fc1_w=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, hidden))),
            fc1_b=T.parameter(np.zeros(hidden)),
            fc2_w=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, channels))),
            fc2_b=T.parameter(np.zeros(channels)),
            groups=groups,
        )

    def parameters(self):
        return [self.k3, self.scale3, self.shift3, self.k1, self.scale1, self.shift1,
                self.alpha, self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


def _affine(x, scale, shift):
    c = x.shape[0]
    return x * scale.reshape(c, 1, 1) + shift.reshape(c, 1, 1)


def repvgg_plux_block(f_in, p):
    """Blend of a 3x3 and a 1x1 grouped conv branch, a squeeze-excite
    channel gate, and a residual connection."""
    f_in = T.as_tensor(f_in)
    c = f_in.shape[0]
    if p.k3.shape[0] != c or p.k1.shape[0] != c:
        raise ConfigurationError(f"block expects {p.k3.shape[0]} channels, input has {c}")
    a = T.clip(p.alpha, 0.0, 1.0)
    b3 = _affine(T.grouped_conv2d(f_in, p.k3, p.groups), p.scale3, p.shift3)
    b1 = _affine(T.grouped_conv2d(f_in, p.k1, p.groups), p.scale1, p.shift1)
    f_m = T.relu(a * b3 + (1.0 - a) * b1)
    squeezed = f_m.mean(axis=(1, 2)).reshape(1, c)
    gate = T.sigmoid(T.relu(squeezed @ p.fc1_w + p.fc1_b) @ p.fc2_w + p.fc2_b)
    return f_m * gate.reshape(c, 1, 1) + f_in


@dataclass
class FusionParams:
    entry: T.Tensor  # C x 2C x 1 x 1
    residual: T.Tensor  # C x 2C x 1 x 1
    blocks: list = field(default_factory=list)

    @classmethod
    def init(cls, channels, num_blocks=1, groups=8, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        std = 1.0 / np.sqrt(2 * channels)
        return cls(
            entry=T.parameter(rng.normal(0.0, std, (channels, 2 * channels, 1, 1))),
            residual=T.parameter(rng.normal(0.0, std, (channels, 2 * channels, 1, 1))),
            blocks=[BlockParams.init(channels, groups, rng=rng) for _ in range(num_blocks)],
        )

    def parameters(self):
        out = [self.entry, self.residual]
        for b in self.blocks:
            out.extend(b.parameters())
        return out


def cross_level_fuse(f_low, f_high, params):
    """Fuse a fine level with the (upsampled) next-coarser level."""
    f_low, f_high = T.as_tensor(f_low), T.as_tensor(f_high)
    c, h, w = f_low.shape
    ch, hh, wh = f_high.shape
    if ch != c:
        raise ContractError(f"channel mismatch between levels: {c} vs {ch}")
    if hh not in (h // 2, (h + 1) // 2) or wh not in (w // 2, (w + 1) // 2):
        raise ContractError(f"coarse level {hh}x{wh} is not half of {h}x{w}")
    joined = T.concat([f_low, T.bilinear_resize(f_high, h, w)], axis=0)
    x = T.grouped_conv2d(joined, params.entry, 1)
    for block in params.blocks:
        x = repvgg_plux_block(x, block)
    return x + T.grouped_conv2d(joined, params.residual, 1)


def fuse_pyramid(pyramid, fusions):
    """Top-down pass: each level fuses with the already-fused level above it."""
    if len(fusions) != len(pyramid) - 1:
        raise ConfigurationError(f"{len(pyramid)} levels need {len(pyramid) - 1} fusion modules, got {len(fusions)}")
    out = [None] * len(pyramid)
    out[-1] = T.as_tensor(pyramid[-1])
    for lvl in range(len(pyramid) - 2, -1, -1):
        out[lvl] = cross_level_fuse(pyramid[lvl], out[lvl + 1], fusions[lvl])
    return out


# redundancy removal ------------------------------------------------------

LEVEL_WISE = "level"
IMAGE_WISE = "image"
BOTH = "both"


def _level_wise(items, threshold):
    kept = []
    for lvl in sorted({pos.level for pos, _ in items}):
        group = [(k, it) for k, it in enumerate(items) if it[0].level == lvl]
        boxes = [unit_box(it[0]) for _, it in group]
        scores = [it[1] for _, it in group]
        kept.extend(group[k][0] for k in nms(boxes, scores, threshold))
    return kept


def _image_wise(items, threshold, strides):
    boxes = []
    for pos, _ in items:
        s = strides[pos.level]
        x, y = grid_to_image_coords(pos, s)
        boxes.append(BBox(x, y, 2 * s, 2 * s))
    return nms(boxes, [sc for _, sc in items], threshold)


def remove_redundancy(selected, iou_threshold=0.3, mode=BOTH, strides=(8, 16, 32, 64)):
    """NMS over unit boxes around selected grid positions.

    Level-wise runs NMS per level in grid-index units; image-wise maps each
    box to image pixels (half-size = stride) and runs one NMS across levels.
    ``both`` applies level-wise then image-wise. Output is sorted by
    descending score, ties by input order.
    """
    items = [(pos, float(score)) for pos, score in selected]
    for _, score in items:
        if not np.isfinite(score):
            raise ContractError("scores must be finite")
    if mode not in (LEVEL_WISE, IMAGE_WISE, BOTH):
        raise ConfigurationError(f"unknown redundancy mode {mode!r}")
    idx = list(range(len(items)))
    if mode in (LEVEL_WISE, BOTH):
        idx = sorted(_level_wise(items, iou_threshold))
    if mode in (IMAGE_WISE, BOTH):
        sub = [items[k] for k in idx]
        idx = sorted(idx[k] for k in _image_wise(sub, iou_threshold, strides))
    idx.sort(key=lambda k: (-items[k][1], k))
    return [items[k] for k in idx]
