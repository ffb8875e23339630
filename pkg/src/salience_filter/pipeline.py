"""Synthetic scenes, salience-predictor training, the filtered encoder
forward pass, two-stage initialization, and selection-bias evaluation."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .errors import ConfigurationError, ContractError, DivergenceError
from .filtering import (EncoderLayerParams, dense_encoder_layer, select_queries,
                        selective_encoder_layer, sine_position_encoding)
from .geometry import BBox, GridPos, grid_axis_coords
from .predictor import PredictorParams, predict_salience
from .refinement import (BackgroundEmbedding, FusionParams, apply_background_embedding,
                         embedding_rows, fuse_pyramid, remove_redundancy)
from .supervision import FocalParams, build_salience_targets, discrete_fg_targets, salience_focal_loss

log = logging.getLogger(__name__)

SCALE_CLASSES = ("small", "medium", "large")

# Fixed feature direction carrying the object signature; shared by every scene
# so that a predictor can learn it.
_SIGNATURE_SEED = 20240101


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 256
    strides: tuple = (8, 16, 32, 64)
    channels: int = 16
    min_objects: int = 3
    max_objects: int = 6
    scale_mix: tuple = (1.0, 1.0, 1.0)
    # longer-side ranges in pixels for small / medium / large
    scale_ranges: tuple = ((8.0, 24.0), (24.0, 64.0), (64.0, 128.0))
    noise: float = 0.5
    signal: float = 1.0
    # longer side at which the in-box response reaches full strength
    full_strength_side: float = 128.0

    def __post_init__(self):
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 0 <= min_objects <= max_objects")
        if len(self.scale_mix) != 3 or min(self.scale_mix) < 0 or sum(self.scale_mix) <= 0:
            raise ConfigurationError("scale_mix needs three non-negative weights with a positive sum")
        for lo, hi in self.scale_ranges:
            if not 0 < lo <= hi <= self.image_size:
                raise ConfigurationError(f"scale range ({lo}, {hi}) does not fit a {self.image_size}px image")

    @property
    def shapes(self):
        return [(-(-self.image_size // s), -(-self.image_size // s)) for s in self.strides]


@dataclass
class SyntheticScene:
    seed: int
    image_size: int
    boxes: list
    scales: list
    pyramid: list
    strides: tuple

    @property
    def shapes(self):
        return [f.shape[1:] for f in self.pyramid]

    def to_record(self):
        return {
            "seed": int(self.seed),
            "image_size": int(self.image_size),
            "boxes": [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "scale": s}
                      for b, s in zip(self.boxes, self.scales)],
        }


def signatures(channels):
    """Two fixed unit directions: in-box extent and object-center response."""
    rng = np.random.default_rng(_SIGNATURE_SEED)
    v = rng.normal(size=(2, channels))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_boxes(rng, config):
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    mix = np.asarray(config.scale_mix, dtype=np.float64)
    mix = mix / mix.sum()
    boxes, scales = [], []
    size = config.image_size
    for _ in range(n):
        cls = int(rng.choice(3, p=mix))
        lo, hi = config.scale_ranges[cls]
        side = rng.uniform(lo, hi)
        aspect = rng.uniform(0.5, 1.0)
        w, h = (side, side * aspect) if rng.random() < 0.5 else (side * aspect, side)
        cx = rng.uniform(w / 2, size - w / 2)
        cy = rng.uniform(h / 2, size - h / 2)
        boxes.append(BBox(float(cx), float(cy), float(w), float(h)))
        scales.append(SCALE_CLASSES[cls])
    return boxes, scales


def _box_responses(xs, ys, boxes, config):
    """Per-position in-box and center responses, max over boxes.

    The in-box response grows with object size (larger objects activate
    backbone features more strongly); the center response is a Gaussian in
    box-normalized coordinates, so its shape is the same at every scale.
    """
    extent = np.zeros((len(xs), len(ys)))
    center = np.zeros((len(xs), len(ys)))
    for b in boxes:
        nx = (xs[:, None] - b.cx) / b.w
        ny = (ys[None, :] - b.cy) / b.h
        inside = (np.abs(nx) <= 0.5) & (np.abs(ny) <= 0.5)
        strength = min(1.0, max(b.w, b.h) / config.full_strength_side)
        np.maximum(extent, np.where(inside, strength, 0.0), out=extent)
        np.maximum(center, np.where(inside, np.exp(-4.0 * (nx * nx + ny * ny)), 0.0), out=center)
    return extent, center


def render_pyramid(boxes, seed, config):
    """Smooth noise plus the in-box and center signatures of every box."""
    rng = np.random.default_rng([int(seed), 1])
    sig_extent, sig_center = signatures(config.channels)
    pyramid = []
    for (h, w), s in zip(config.shapes, config.strides):
        coarse = rng.normal(size=(config.channels, max(1, h // 2), max(1, w // 2)))
        noise = T.bilinear_resize(coarse, h, w).data * config.noise
        extent, center = _box_responses(grid_axis_coords(h, s), grid_axis_coords(w, s), boxes, config)
        signal = config.signal * (extent[None] * sig_extent[:, None, None]
                                  + center[None] * sig_center[:, None, None])
        pyramid.append(noise + signal)
    return pyramid


def generate_scene(seed, config=SceneConfig()):
    rng = np.random.default_rng(int(seed))
    boxes, scales = _sample_boxes(rng, config)
    return SyntheticScene(int(seed), config.image_size, boxes, scales,
                          render_pyramid(boxes, seed, config), tuple(config.strides))


def scene_from_record(record, config=SceneConfig()):
    boxes = [BBox(b["cx"], b["cy"], b["w"], b["h"]) for b in record["boxes"]]
    scales = [b.get("scale", "") for b in record["boxes"]]
    if record.get("image_size", config.image_size) != config.image_size:
        raise ConfigurationError("record image size differs from the scene config")
    return SyntheticScene(int(record["seed"]), config.image_size, boxes, scales,
                          render_pyramid(boxes, record["seed"], config), tuple(config.strides))


def scene_seeds(n, seed):
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


def make_corpus(n, seed=42, config=SceneConfig()):
    return [generate_scene(s, config) for s in scene_seeds(n, seed)]


# training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 2.0
    momentum: float = 0.9
    lambda_f: float = 2.0
    supervision: str = "salience"
    shuffle_labels: bool = False
    seed: int = 42
    hidden: int = None
    batch_size: int = 8
    schedule: str = "cosine"

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.epochs < 1 or self.lr < 0:
            raise ConfigurationError("epochs must be positive and the learning rate non-negative")
        if self.supervision not in ("salience", "discrete"):
            raise ConfigurationError(f"unknown supervision {self.supervision!r}")


def scene_targets(scene, supervision="salience"):
    if supervision == "salience":
        return build_salience_targets(scene.shapes, scene.strides, scene.boxes)
    return discrete_fg_targets(scene.shapes, scene.strides, scene.boxes)


def _shuffle_targets(targets, rng):
    """Permute target values across every position of every scene."""
    flat = np.concatenate([m.reshape(-1) for maps in targets for m in maps])
    flat = flat[rng.permutation(len(flat))]
    out, start = [], 0
    for maps in targets:
        scene = []
        for m in maps:
            scene.append(flat[start:start + m.size].reshape(m.shape))
            start += m.size
        out.append(scene)
    return out


def corpus_targets(corpus, config):
    targets = [scene_targets(s, config.supervision) for s in corpus]
    if config.shuffle_labels:
        targets = _shuffle_targets(targets, np.random.default_rng([config.seed, 7]))
    return targets


@dataclass
class TrainResult:
    params: PredictorParams
    losses: list = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0


def corpus_loss(params, corpus, targets, focal):
    total = 0.0
    for scene, tgt in zip(corpus, targets):
        total += focal.weight * salience_focal_loss(predict_salience(scene.pyramid, params), tgt, focal).item()
    return total / len(corpus)


def train_salience(corpus, config=TrainConfig(), params=None):
    """Momentum SGD on the weighted salience focal loss.

    Returns the trained parameters, the mean training loss of each epoch,
    and the full-corpus loss before and after training.
    """
    if not corpus:
        raise ContractError("training needs a non-empty corpus")
    channels = corpus[0].pyramid[0].shape[0]
    levels = len(corpus[0].pyramid)
    if params is None:
        params = PredictorParams.init(channels, levels, config.hidden, np.random.default_rng(config.seed))
    focal = FocalParams(weight=config.lambda_f)
    targets = corpus_targets(corpus, config)
    plist = params.parameters()
    velocity = [np.zeros_like(p.data) for p in plist]
    order_rng = np.random.default_rng([config.seed, 3])
    batches_per_epoch = -(-len(corpus) // config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    step = 0

    result = TrainResult(params, initial_loss=corpus_loss(params, corpus, targets, focal))
    for epoch in range(config.epochs):
        running = 0.0
        order = order_rng.permutation(len(corpus))
        for start in range(0, len(corpus), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = [np.zeros_like(p.data) for p in plist]
            for k in batch:
                with T.Tape() as tape:
                    loss = salience_focal_loss(predict_salience(corpus[k].pyramid, params), targets[k], focal)
                    loss = loss * focal.weight
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, scene {corpus[k].seed}")
                T.backward(tape, loss, plist)
                for g, p in zip(grads, plist):
                    g += p.grad / len(batch)
                running += value
            lr = config.lr
            if config.schedule == "cosine":
                lr *= 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            for p, v, g in zip(plist, velocity, grads):
                v *= config.momentum
                v += g
                p.data = p.data - lr * v
            step += 1
        result.losses.append(running / len(corpus))
        if not all(np.all(np.isfinite(p.data)) for p in plist):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")
        log.debug("epoch %d loss %.6f", epoch, result.losses[-1])
    result.final_loss = corpus_loss(params, corpus, targets, focal)
    return result



def roc_auc(scores, labels):
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def predicted_maps(params, scene):
    return [m.data for m in predict_salience(scene.pyramid, params)]


def foreground_auc(params, corpus, label_maps=None):
    """AUC of predicted salience for separating in-box from background
    positions, pooled over levels and scenes. ``label_maps`` overrides the
    true foreground labels (used for the shuffled-label null)."""
    scores, labels = [], []
    for k, scene in enumerate(corpus):
        maps = predicted_maps(params, scene)
        truth = label_maps[k] if label_maps is not None else build_salience_targets(
            scene.shapes, scene.strides, scene.boxes)
        for m, t in zip(maps, truth):
            scores.append(m.reshape(-1))
            labels.append(t.reshape(-1) > 0)
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


# encoder -----------------------------------------------------------------

@dataclass
class EncoderModel:
    predictor: PredictorParams
    layers: list
    level_embed: np.ndarray
    background: dict
    fusions: list

    @classmethod
    def init(cls, channels=16, levels=4, num_layers=2, heads=4, embed_rows=32,
             fusion_blocks=1, groups=8, seed=0, predictor=None):
        rng = np.random.default_rng([int(seed), 11])
        if predictor is None:
            predictor = PredictorParams.init(channels, levels, rng=rng)
        layers = [EncoderLayerParams.init(channels, heads, rng=rng) for _ in range(num_layers)]
        level_embed = rng.normal(0.0, 0.1, (levels, channels))
        background = {
            "absolute": BackgroundEmbedding.init(embed_rows, channels, "absolute", rng),
            "relative": BackgroundEmbedding.init(embed_rows, channels, "relative", rng),
        }
        fusions = [FusionParams.init(channels, fusion_blocks, groups, rng) for _ in range(levels - 1)]
        return cls(predictor, layers, level_embed, background, fusions)


def flatten_pyramid(pyramid):
    rows = [T.as_tensor(f).reshape(f.shape[0], f.shape[1] * f.shape[2]).T for f in pyramid]
    return T.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def position_rows(shapes, level_embed):
    c = level_embed.shape[1]
    return np.concatenate([sine_position_encoding(h, w, c) + level_embed[k]
                           for k, (h, w) in enumerate(shapes)])


@dataclass
class EncodeResult:
    queries: np.ndarray
    plan: object
    salience: list
    inputs: np.ndarray


def encode_scene(scene, model, ratios, embedding="absolute", fusion=False):
    """Predict salience, filter, encode the selected queries layer by layer,
    then add the background embedding to queries left unselected."""
    if len(ratios.layer) != len(model.layers):
        raise ConfigurationError(f"{len(ratios.layer)} layer ratios for {len(model.layers)} encoder layers")
    if embedding not in ("absolute", "relative", "none"):
        raise ConfigurationError(f"unknown embedding {embedding!r}")
    salience = predicted_maps(model.predictor, scene)
    feats = fuse_pyramid(scene.pyramid, model.fusions) if fusion else scene.pyramid
    queries = flatten_pyramid(feats)
    inputs = queries.data.copy()
    pos = position_rows(scene.shapes, model.level_embed)
    plan = select_queries(salience, ratios)
    for t, layer in enumerate(model.layers):
        queries = selective_encoder_layer(queries, pos, plan.omega(t), layer)
    if embedding != "none":
        rows = embedding_rows(model.background[embedding], scene.shapes)
        queries = apply_background_embedding(queries, plan, rows)
    return EncodeResult(queries.data, plan, salience, inputs)


def dense_encode(scene, model):
    """Numpy oracle: every encoder layer applied densely, no refinements."""
    q = flatten_pyramid(scene.pyramid).data
    pos = position_rows(scene.shapes, model.level_embed)
    for layer in model.layers:
        q = dense_encoder_layer(q, pos, layer)
    return q


def flat_to_grid(index, shapes):
    for lvl, (h, w) in enumerate(shapes):
        if index < h * w:
            return GridPos(lvl, int(index // w), int(index % w))
        index -= h * w
    raise ContractError("flat index beyond the pyramid")


def two_stage_initialize(queries, salience_maps, k, nms_threshold=0.3,
                         strides=(8, 16, 32, 64), redundancy=True):
    """Top-k positions by salience, then level-wise and image-wise NMS."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    shapes = [np.shape(m) for m in salience_maps]
    scores = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in salience_maps])
    if queries is not None and len(queries) != len(scores):
        raise ContractError(f"{len(queries)} queries but {len(scores)} salience positions")
    order = np.argsort(-scores, kind="stable")[:k]
    picked = [(flat_to_grid(int(i), shapes), float(scores[i])) for i in order]
    if not redundancy:
        return picked
    return remove_redundancy(picked, nms_threshold, "both", strides)


# selection bias ----------------------------------------------------------

def _selected_points(plan, shapes, strides):
    """Image coordinates of the final layer's selected queries."""
    pts = []
    for sel, (h, w), s in zip(plan.selections[-1], shapes, strides):
        xs = grid_axis_coords(h, s)
        ys = grid_axis_coords(w, s)
        pts.append(np.stack([xs[sel // w], ys[sel % w]], axis=1))
    return np.concatenate(pts) if pts else np.zeros((0, 2))


def _inside_counts(points, boxes):
    counts = []
    for b in boxes:
        inside = (np.abs(points[:, 0] - b.cx) <= b.w / 2) & (np.abs(points[:, 1] - b.cy) <= b.h / 2)
        counts.append(int(inside.sum()))
    return counts


def evaluate_selection_bias(params, corpus, ratios):
    """Per scale class: fraction of objects with at least one selected query
    inside the box, and mean selected queries per object (final layer)."""
    hits = {s: [] for s in SCALE_CLASSES}
    for scene in corpus:
        plan = select_queries(predicted_maps(params, scene), ratios)
        if plan.num_layers:
            pts = _selected_points(plan, scene.shapes, scene.strides)
        else:
            pts = np.zeros((0, 2))
        for cls, n in zip(scene.scales, _inside_counts(pts, scene.boxes)):
            hits.setdefault(cls, []).append(n)
    report = {}
    for cls, counts in hits.items():
        if not counts:
            continue
        counts = np.asarray(counts)
        report[cls] = {"coverage": float(np.mean(counts >= 1)),
                       "selected_per_object": float(np.mean(counts)),
                       "objects": int(len(counts))}
    return report


def init_coverage(params, corpus, k, nms_threshold=0.3, redundancy=True):
    """Two-stage proposals vs. objects: fraction covered and proposals per
    covered object (a proxy for the redundancy the decoder must absorb)."""
    covered, per_object = [], []
    for scene in corpus:
        maps = predicted_maps(params, scene)
        picked = two_stage_initialize(None, maps, k, nms_threshold, scene.strides, redundancy)
        pts = np.array([[scene.strides[p.level] // 2 + p.i * scene.strides[p.level],
                         scene.strides[p.level] // 2 + p.j * scene.strides[p.level]] for p, _ in picked],
                       dtype=np.float64).reshape(-1, 2)
        for n in _inside_counts(pts, scene.boxes):
            covered.append(n >= 1)
            if n:
                per_object.append(n)
    return {"coverage": float(np.mean(covered)) if covered else 0.0,
            "proposals_per_covered_object": float(np.mean(per_object)) if per_object else 0.0}
