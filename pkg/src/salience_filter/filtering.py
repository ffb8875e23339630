"""Hierarchical query filtering and the selective encoder layer.

Level ratios ``v`` (one per pyramid level) and layer ratios ``w`` (one per
encoder layer) set how many queries each (layer, level) pair refines:
``ceil(v_level * w_layer * H*W)``. Only those rows go through attention;
all others pass through bitwise unchanged.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError

# Guards ceil() against products like 0.1 * 3 that land a hair above an integer.
_CEIL_SLACK = 1e-9


@dataclass(frozen=True)
class FilterRatios:
    level: tuple
    layer: tuple

    def __post_init__(self):
        object.__setattr__(self, "level", tuple(float(v) for v in self.level))
        object.__setattr__(self, "layer", tuple(float(w) for w in self.layer))
        for r in self.level + self.layer:
            if not 0.0 <= r <= 1.0:
                raise ConfigurationError(f"filter ratio {r} outside [0, 1]")

    @classmethod
    def uniform(cls, value, levels, layers):
        return cls((value,) * levels, (value,) * layers)


@dataclass
class FilterPlan:
    """Selected local flat indices per (layer, level)."""

    level_sizes: tuple
    ratios: FilterRatios
    selections: list = field(default_factory=list)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.level_sizes)[:-1]]).astype(np.int64)

    @property
    def num_layers(self):
        return len(self.selections)

    @property
    def total_queries(self):
        return int(sum(self.level_sizes))

    def omega(self, layer):
        """Global (flattened-pyramid) indices refined at ``layer``."""
        parts = [sel + off for sel, off in zip(self.selections[layer], self.offsets)]
        return np.concatenate(parts).astype(np.int64) if parts else np.zeros(0, np.int64)

    def counts(self):
        return [[len(sel) for sel in layer] for layer in self.selections]

    def to_json(self):
        return {
            "level_sizes": [int(n) for n in self.level_sizes],
            "level_ratios": list(self.ratios.level),
            "layer_ratios": list(self.ratios.layer),
            "layers": [[sel.tolist() for sel in layer] for layer in self.selections],
        }


def keep_count(v, w, n):
    if v == 0.0 or w == 0.0 or n == 0:
        return 0
    return min(n, max(1, math.ceil(v * w * n - _CEIL_SLACK)))


def top_k_indices(scores, k):
    """Indices of the k largest scores, ties to the lower index, sorted ascending."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64).reshape(-1), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def select_queries(salience_maps, ratios):
    if len(salience_maps) != len(ratios.level):
        raise ConfigurationError(f"{len(ratios.level)} level ratios for {len(salience_maps)} levels")
    flat = [np.asarray(m, dtype=np.float64).reshape(-1) for m in salience_maps]
    sizes = tuple(len(f) for f in flat)
    orders = [np.argsort(-f, kind="stable") for f in flat]
    selections = []
    for w in ratios.layer:
        layer = []
        for order, v, n in zip(orders, ratios.level, sizes):
            k = keep_count(v, w, n)
            layer.append(np.sort(order[:k]).astype(np.int64))
        selections.append(layer)
    return FilterPlan(sizes, ratios, selections)


# encoder layer -----------------------------------------------------------

@dataclass
class EncoderLayerParams:
    wq: T.Tensor
    bq: T.Tensor
    wk: T.Tensor
    bk: T.Tensor
    wv: T.Tensor
    bv: T.Tensor
    wo: T.Tensor
    bo: T.Tensor
    w_ff1: T.Tensor
    b_ff1: T.Tensor
    w_ff2: T.Tensor
    b_ff2: T.Tensor
    heads: int = 4

    @classmethod
    def init(cls, channels, heads=4, ff_dim=None, rng=None):
        if channels % heads:
            raise ConfigurationError(f"{channels} channels not divisible by {heads} heads")
        rng = np.random.default_rng(0) if rng is None else rng
        ff_dim = 2 * channels if ff_dim is None else ff_dim

        def lin(n_in, n_out):
            return (T.parameter(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))),
                    T.parameter(rng.normal(0.0, 0.1, n_out)))

        wq, bq = lin(channels, channels)
        wk, bk = lin(channels, channels)
        wv, bv = lin(channels, channels)
        wo, bo = lin(channels, channels)
        w1, b1 = lin(channels, ff_dim)
        w2, b2 = lin(ff_dim, channels)
        return cls(wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2, heads)

    def parameters(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
                self.w_ff1, self.b_ff1, self.w_ff2, self.b_ff2]


def _split_heads(x, heads):
    n, c = x.shape
    return x.reshape(n, heads, c // heads).transpose(1, 0, 2)


def selective_encoder_layer(queries, pos, omega, params):
    """Refine rows ``omega`` with attention over all rows, then a feed-forward block.

    Queries are the selected rows plus position; keys are all rows plus
    position; values are all rows. Both sub-blocks are residual.
    """
    queries = T.as_tensor(queries)
    pos = T.as_tensor(pos)
    omega = np.asarray(omega, dtype=np.int64)
    n, c = queries.shape
    if omega.size and (omega.min() < 0 or omega.max() >= n):
        raise ContractError(f"selected index out of bounds for {n} queries")
    if omega.size == 0:
        return queries
    heads = params.heads

    sel = T.take_rows(queries, omega)
    sel_pos = T.take_rows(pos, omega)
    q = (sel + sel_pos) @ params.wq + params.bq
    k = (queries + pos) @ params.wk + params.bk
    v = queries @ params.wv + params.bv

    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(c // heads))
    attn = T.softmax(scores, axis=-1)
    mixed = (attn @ vh).transpose(1, 0, 2).reshape(len(omega), c)
    h = sel + (mixed @ params.wo + params.bo)
    out = h + (T.relu(h @ params.w_ff1 + params.b_ff1) @ params.w_ff2 + params.b_ff2)
    return T.index_update(queries, omega, out)


def dense_encoder_layer(queries, pos, params):
    """Plain numpy encoder layer over every row; the oracle for full selection."""
    q_in = np.asarray(queries, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    n, c = q_in.shape
    m = params.heads
    d = c // m
    q = (q_in + pos) @ params.wq.data + params.bq.data
    k = (q_in + pos) @ params.wk.data + params.bk.data
    v = q_in @ params.wv.data + params.bv.data
    out = np.zeros((n, c))
    for head in range(m):
        sl = slice(head * d, (head + 1) * d)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        logits = logits - logits.max(axis=1, keepdims=True)
        wts = np.exp(logits)
        wts /= wts.sum(axis=1, keepdims=True)
        out[:, sl] = wts @ v[:, sl]
    h = q_in + out @ params.wo.data + params.bo.data
    ff = np.maximum(h @ params.w_ff1.data + params.b_ff1.data, 0.0) @ params.w_ff2.data + params.b_ff2.data
    return h + ff


def sine_position_encoding(h, w, channels, temperature=10000.0):
    """Fixed 2-D sinusoidal encoding, rows in (i, j) row-major order (H*W x C).

    First half of the channels encodes the i axis, second half the j axis.
    """
    if channels % 4:
        raise ConfigurationError(f"sine encoding needs channels divisible by 4, got {channels}")
    half = channels // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    ii = (np.arange(h) + 0.5) / h * 2 * math.pi
    jj = (np.arange(w) + 0.5) / w * 2 * math.pi
    pi = ii[:, None] / dim_t
    pj = jj[:, None] / dim_t
    pi = np.where(np.arange(half) % 2 == 0, np.sin(pi), np.cos(pi))
    pj = np.where(np.arange(half) % 2 == 0, np.sin(pj), np.cos(pj))
    enc = np.concatenate([np.repeat(pi, w, axis=0), np.tile(pj, (h, 1))], axis=1)
    return enc


# cost accounting ---------------------------------------------------------

def analytic_cost(shapes, ratios, channels, heads, points, layers):
    """Deformable-encoder operation counts, dense and filtered.

    ``points`` is the number of sampled keys per head. Big-O constants are
    dropped, so these are term-for-term evaluations of the cost model.
    """
    c, m, k = channels, heads, points
    per_query = c * (c + k * c + 5 * k + 3 * m * k)
    if len(ratios.level) != len(shapes) or len(ratios.layer) != layers:
        raise ConfigurationError("ratio lists do not match level/layer counts")
    dense = 0
    for h, w in shapes:
        dense += h * w * layers * per_query
    filtered = 0.0
    for (h, w), v in zip(shapes, ratios.level):
        for wt in ratios.layer:
            filtered += v * wt * h * w * per_query
    return dense, filtered


@dataclass(frozen=True)
class KeepRatio:
    counted: float
    closed_form: float


def measured_keep_ratio(plan, strides=None):
    """Directly counted fraction of refined query slots, plus the closed form
    ``(|w|_1 / T) * (|v * s^2|_1 / |s^2|_1)`` for comparison.

    Without ``strides``, s^2 is taken proportional to 1 / (H_l W_l).
    """
    layers = plan.num_layers
    total = plan.total_queries
    selected = sum(sum(layer) for layer in plan.counts())
    counted = selected / (layers * total) if layers and total else 0.0

    if strides is None:
        s2 = np.array([1.0 / n for n in plan.level_sizes])
    else:
        s2 = np.asarray(strides, dtype=np.float64) ** 2
    v = np.asarray(plan.ratios.level)
    w = np.asarray(plan.ratios.layer)
    closed = float(w.sum() / len(w) * ((v * s2).sum() / s2.sum())) if len(w) else 0.0
    return KeepRatio(counted, closed)
