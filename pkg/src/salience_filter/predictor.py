"""Per-level salience prediction with top-down score modulation.

The coarsest level is scored first. Each finer level's features are
scaled by ``1 + UP(alpha_l * s_{l+1})`` before the shared perceptron
scores them, where ``s_{l+1}`` is the (post-sigmoid) map one level up.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError


@dataclass
class PredictorParams:
    w1: T.Tensor  # C x hidden
    b1: T.Tensor
    w2: T.Tensor  # hidden x 1
    b2: T.Tensor
    alphas: T.Tensor  # one per level except the coarsest

    @classmethod
    def init(cls, channels, levels, hidden=None, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = channels if hidden is None else hidden
        return cls(
            w1=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, hidden))),
            b1=T.parameter(np.zeros(hidden)),
            w2=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1))),
            b2=T.parameter(np.zeros(1)),
            alphas=T.parameter(np.ones(levels - 1)),
        )

    @property
    def channels(self):
        return self.w1.shape[0]

    def named(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2, "alphas": self.alphas}

    def parameters(self):
        return list(self.named().values())


def mlp_score(x, params):
    """Shared two-layer perceptron: rows of ``x`` (N x C) to N x 1 logits."""
    hidden = T.relu(x @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def _flatten(f):
    c, h, w = f.shape
    return f.reshape(c, h * w).T


def predict_salience(pyramid, params):
    """Return one H_l x W_l probability map per level (fine to coarse order)."""
    pyramid = [T.as_tensor(f) for f in pyramid]
    if len(pyramid) - 1 != params.alphas.shape[0]:
        raise ConfigurationError(f"{len(pyramid)} levels but {params.alphas.shape[0]} modulation coefficients")
    for f in pyramid:
        if f.ndim != 3 or f.shape[0] != params.channels:
            raise ConfigurationError(f"feature map {f.shape} does not match perceptron width {params.channels}")

    n = len(pyramid)
    maps = [None] * n
    top = pyramid[-1]
    maps[-1] = T.sigmoid(mlp_score(_flatten(top), params).reshape(top.shape[1:]))
    for lvl in range(n - 2, -1, -1):
        f = pyramid[lvl]
        _, h, w = f.shape
        above = maps[lvl + 1]
        alpha = T.take_rows(params.alphas, [lvl])
        scaled = (above * alpha).reshape(1, *above.shape)
        factor = T.bilinear_resize(scaled, h, w) + 1.0
        modulated = f * factor
        maps[lvl] = T.sigmoid(mlp_score(_flatten(modulated), params).reshape(h, w))
    return maps
