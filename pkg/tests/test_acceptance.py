"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines also
appear in the terminal summary.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_report import criterion
from oracles import brute_force_nms
from salience_filter import tensor as T
from salience_filter.filtering import (EncoderLayerParams, FilterRatios, analytic_cost, dense_encoder_layer,
                                     measured_keep_ratio, select_queries, selective_encoder_layer)
from salience_filter.geometry import BBox, GridPos, iou, nms, unit_box
from salience_filter.pipeline import (SceneConfig, TrainConfig, corpus_targets, evaluate_selection_bias,
                                    foreground_auc, make_corpus, train_salience)
from salience_filter.predictor import PredictorParams, mlp_score, predict_salience
from salience_filter.refinement import (BackgroundEmbedding, BlockParams, FusionParams,
                                      apply_background_embedding, cross_level_fuse, embedding_rows,
                                      remove_redundancy, repvgg_plux_block)
from salience_filter.supervision import FocalParams, salience_confidence, salience_focal_loss

DEFAULT_RATIOS = FilterRatios((0.3, 0.5, 0.7, 1.0), (1.0, 0.6))


# 1 ---------------------------------------------------------------------

def test_criterion_1_salience_goldens():
    box = BBox(37.0, 81.0, 30.0, 50.0)
    with criterion(1, "salience goldens", 1.0) as c:
        cases = {
            "center": ((37.0, 81.0), 1.0),
            "corner": ((52.0, 106.0), 0.0),
            "edge_midpoint": ((52.0, 81.0), 1.0 - math.sqrt(0.5)),
            "outside": ((60.0, 81.0), 0.0),
        }
        for name, (pt, expect) in cases.items():
            got = salience_confidence(pt, box)
            c.check(name, abs(got - expect) <= 1e-12, f"{got:.15f}")


# 2 ---------------------------------------------------------------------

def test_criterion_2_scale_independence():
    rng = np.random.default_rng(2)
    with criterion(2, "scale independence, 1000 pairs", 1.0) as c:
        mismatches = 0
        for _ in range(1000):
            w1, h1, w2, h2 = (int(v) for v in rng.integers(4, 513, 4))
            ux, uy = (int(v) / 1024 for v in rng.integers(-600, 601, 2))  # some fall outside the box
            b1 = BBox(float(rng.integers(0, 1000)), float(rng.integers(0, 1000)), float(w1), float(h1))
            b2 = BBox(float(rng.integers(0, 1000)), float(rng.integers(0, 1000)), float(w2), float(h2))
            v1 = salience_confidence((b1.cx + ux * w1, b1.cy + uy * h1), b1)
            v2 = salience_confidence((b2.cx + ux * w2, b2.cy + uy * h2), b2)
            mismatches += v1 != v2
        c.check("exact_mismatches", mismatches == 0, str(mismatches))


# 3 ---------------------------------------------------------------------

def _fd(f, params, seed, floor=1e-4, probes=25):
    """Relative FD error over probes drawn from coordinates whose gradient
    exceeds ``floor`` (relative error is undefined near zero gradients)."""
    with T.Tape() as tape:
        loss = f()
    T.backward(tape, loss, params)
    grads = [p.grad.reshape(-1).copy() for p in params]
    eligible = sum(int(np.sum(np.abs(g) > floor)) for g in grads)
    err = T.finite_difference_check(f, params, n_probes=probes, rng=np.random.default_rng(seed),
                                    accept=lambda k, i: abs(grads[k][i]) > floor)
    return err, min(probes, eligible)


def test_criterion_3_gradient_suite():
    rng = np.random.default_rng(3)
    with criterion(3, "gradient suite", 120.0) as c:
        pred = PredictorParams.init(6, 3, hidden=8, rng=rng)
        pred.b1.data[:] = 0.3
        x = T.parameter(rng.normal(size=(10, 6)))
        wx = rng.normal(size=(10, 1))
        cases = {"mlp": (lambda: (mlp_score(x, pred) * wx).sum(), [x, pred.w1, pred.b1, pred.w2, pred.b2])}

        pyr = [rng.normal(size=(6, 8 >> k, 8 >> k)) for k in range(3)]
        wp = [rng.normal(size=f.shape[1:]) for f in pyr]

        def predictor_loss():
            total = T.constant(0.0)
            for m, w in zip(predict_salience(pyr, pred), wp):
                total = total + (m * w).sum()
            return total

        cases["predictor"] = (predictor_loss, pred.parameters())

        p_in = T.parameter(rng.uniform(0.05, 0.95, (8, 8)))
        target = rng.uniform(0, 1, (8, 8))
        cases["focal_loss"] = (lambda: salience_focal_loss([p_in], [target], FocalParams()), [p_in])

        fusion = FusionParams.init(4, num_blocks=2, groups=2, rng=rng)
        for b in fusion.blocks:
            b.fc1_b.data[:] = 0.5
        lo, hi = T.parameter(rng.normal(size=(4, 4, 4))), T.parameter(rng.normal(size=(4, 2, 2)))
        wf = rng.normal(size=(4, 4, 4))
        cases["fusion"] = (lambda: (cross_level_fuse(lo, hi, fusion) * wf).sum(), [lo, hi] + fusion.parameters())

        layer = EncoderLayerParams.init(4, heads=2, rng=rng)
        for p in layer.parameters():
            if p.ndim == 1:
                p.data[:] += 0.5
        q = T.parameter(rng.normal(size=(8, 4)))
        pos = rng.normal(size=(8, 4)) * 0.1
        wq = rng.normal(size=(8, 4))
        cases["selective_attention"] = (lambda: (selective_encoder_layer(q, pos, [0, 2, 5, 6], layer) * wq).sum(),
                                        [q] + layer.parameters())

        for k, (name, (f, params)) in enumerate(cases.items()):
            err, probes = _fd(f, params, seed=k)
            c.check(name, err < 1e-4 and probes >= 20, f"{err:.1e}/{probes}probes")


# 4 ---------------------------------------------------------------------

def test_criterion_4_filtering():
    rng = np.random.default_rng(4)
    with criterion(4, "filtering correctness", 60.0) as c:
        layer = EncoderLayerParams.init(16, heads=4, rng=rng)
        q, pos = rng.normal(size=(85, 16)), rng.normal(size=(85, 16)) * 0.1
        full = selective_encoder_layer(q, pos, np.arange(85), layer).data
        delta = float(np.max(np.abs(full - dense_encoder_layer(q, pos, layer))))
        c.check("dense_oracle", delta < 1e-10, f"{delta:.1e}")

        shapes = [(8, 8), (4, 4), (2, 2), (1, 1)]
        layers = [EncoderLayerParams.init(16, heads=4, rng=rng) for _ in range(3)]
        broken = 0
        for _ in range(30):
            ratios = FilterRatios(rng.random(4).round(2), rng.random(3).round(2))
            plan = select_queries([rng.random(s) for s in shapes], ratios)
            x = T.as_tensor(q)
            for t, p in enumerate(layers):
                before = x.data.copy()
                x = selective_encoder_layer(x, pos, plan.omega(t), p)
                rest = np.setdiff1d(np.arange(85), plan.omega(t))
                broken += x.data[rest].tobytes() != before[rest].tobytes()
        c.check("unselected_bitwise", broken == 0, f"{broken} violations")

        wrong = 0
        for _ in range(200):
            side = int(rng.integers(2, 9))
            m = rng.integers(0, 12, (side, side)).astype(float)  # frequent ties
            v = int(rng.integers(0, 17)) / 16
            plan = select_queries([m], FilterRatios((v,), (1.0,)))
            n = side * side
            k = 0 if v == 0 else min(n, max(1, math.ceil(Fraction(v) * n)))
            oracle = sorted(sorted(range(n), key=lambda i: (-m.reshape(-1)[i], i))[:k])
            wrong += plan.selections[0][0].tolist() != oracle
        c.check("topk_vs_full_sort_200", wrong == 0, f"{wrong} mismatches")


# 5 ---------------------------------------------------------------------

def test_criterion_5_cost_accounting():
    rng = np.random.default_rng(5)
    shapes = SceneConfig().shapes
    with criterion(5, "cost accounting", 60.0) as c:
        c_, m, k, t = 256, 8, 4, 6
        dense, filtered = analytic_cost(shapes, FilterRatios.uniform(1.0, 4, t), c_, m, k, t)
        expect = sum(h * w for h, w in shapes) * c_ * t * (c_ + k * c_ + 5 * k + 3 * m * k)
        c.check("ratios_one_equal_dense", filtered == dense == expect, f"{dense}")

        layer = EncoderLayerParams.init(16, heads=4, rng=rng)
        q, pos = rng.normal(size=(340, 16)), rng.normal(size=(340, 16))
        sizes, macs = [34, 102, 204], []
        for n in sizes:
            with T.OpCounter() as counter:
                selective_encoder_layer(q, pos, np.arange(n), layer)
            macs.append(counter.macs)
        slope, icept = np.polyfit(sizes, macs, 1)
        resid = np.asarray(macs) - (slope * np.asarray(sizes) + icept)
        r2 = 1 - np.sum(resid ** 2) / np.sum((macs - np.mean(macs)) ** 2)
        c.check("mac_linearity", r2 > 0.999, f"R2={r2:.6f}")

        maps = [rng.random(s) for s in shapes]
        default = measured_keep_ratio(select_queries(maps, DEFAULT_RATIOS), (8, 16, 32, 64))
        c.check("default_reported", True, f"counted={default.counted:.4f},closed={default.closed_form:.4f}")
        agree = []
        for v, w in [(1.0, (1.0, 1.0)), (0.5, (0.5, 0.5)), (0.25, (0.5, 0.5)), (0.75, (0.25, 0.25))]:
            kr = measured_keep_ratio(select_queries(maps, FilterRatios((v,) * 4, w)), (8, 16, 32, 64))
            agree.append(kr.counted == kr.closed_form)
        c.check("uniform_agree", all(agree), f"{sum(agree)}/{len(agree)}")


# 6 ---------------------------------------------------------------------

def test_criterion_6_nms_and_redundancy():
    rng = np.random.default_rng(6)
    with criterion(6, "NMS and redundancy removal", 30.0) as c:
        wrong = 0
        for _ in range(500):
            n = int(rng.integers(1, 11))
            boxes = [BBox(float(x), float(y), float(w), float(h))
                     for x, y, w, h in zip(rng.uniform(0, 40, n), rng.uniform(0, 40, n),
                                           rng.uniform(2, 20, n), rng.uniform(2, 20, n))]
            scores = rng.integers(0, 6, n).astype(float).tolist()  # ties included
            thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
            wrong += sorted(nms(boxes, scores, thr)) != sorted(brute_force_nms(boxes, scores, thr))
        c.check("greedy_vs_brute_force_500", wrong == 0, f"{wrong} mismatches")

        adj = iou(unit_box(GridPos(0, 2, 2)), unit_box(GridPos(0, 3, 2)))
        diag = iou(unit_box(GridPos(0, 2, 2)), unit_box(GridPos(0, 3, 3)))
        kept_adj = remove_redundancy([(GridPos(0, 2, 2), 0.9), (GridPos(0, 3, 2), 0.8)], 0.3)
        kept_diag = remove_redundancy([(GridPos(0, 2, 2), 0.9), (GridPos(0, 3, 3), 0.8)], 0.3)
        c.check("adjacent_suppressed", len(kept_adj) == 1 and abs(adj - 1 / 3) < 1e-15, f"iou={adj:.4f}")
        c.check("diagonal_kept", len(kept_diag) == 2 and abs(diag - 1 / 7) < 1e-15, f"iou={diag:.4f}")

        not_idem = 0
        for _ in range(200):
            n = int(rng.integers(0, 30))
            cells = {(int(l), int(i), int(j)) for l, i, j in zip(rng.integers(0, 4, n), rng.integers(0, 8, n),
                                                                 rng.integers(0, 8, n))}
            sel = [(GridPos(*cell), float(rng.random())) for cell in sorted(cells)]
            once = remove_redundancy(sel, 0.3)
            not_idem += remove_redundancy(once, 0.3) != once or not set(once) <= set(sel)
        c.check("idempotent_200", not_idem == 0, f"{not_idem} violations")


# 7, 8: shared training runs ----------------------------------------------

class _Timed:
    def __init__(self, result, seconds):
        self.result, self.seconds = result, seconds


def _train(corpus, config):
    start = time.perf_counter()
    result = train_salience(corpus, config)
    return _Timed(result, time.perf_counter() - start)


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(64, seed=42)


@pytest.fixture(scope="module")
def salience_run(corpus):
    return _train(corpus, TrainConfig())


@pytest.fixture(scope="module")
def discrete_run(corpus):
    return _train(corpus, TrainConfig(supervision="discrete"))


@pytest.fixture(scope="module")
def shuffled_run(corpus):
    return _train(corpus, TrainConfig(shuffle_labels=True))


@pytest.mark.slow
def test_criterion_7_training(corpus, salience_run, shuffled_run):
    with criterion(7, "desk-scale training", 600.0, spent=salience_run.seconds + shuffled_run.seconds) as c:
        res = salience_run.result
        ratio = res.final_loss / res.initial_loss
        c.check("loss_ratio", ratio < 0.5, f"{ratio:.4f}")
        auc = foreground_auc(res.params, corpus)
        c.check("auc", auc > 0.90, f"{auc:.4f}")
        null_cfg = TrainConfig(shuffle_labels=True)
        null_auc = foreground_auc(shuffled_run.result.params, corpus, corpus_targets(corpus, null_cfg))
        c.check("null_auc", abs(null_auc - 0.5) <= 0.05, f"{null_auc:.4f}")
        # reported only: the null model against true labels
        true_label_auc = foreground_auc(shuffled_run.result.params, corpus)
        c.check("null_vs_true_labels(info)", True, f"{true_label_auc:.4f}")


@pytest.mark.slow
def test_criterion_8_scale_bias(corpus, salience_run, discrete_run):
    with criterion(8, "scale-bias experiment", 900.0, spent=salience_run.seconds + discrete_run.seconds) as c:
        sal = evaluate_selection_bias(salience_run.result.params, corpus, DEFAULT_RATIOS)
        dis = evaluate_selection_bias(discrete_run.result.params, corpus, DEFAULT_RATIOS)
        gap = sal["small"]["coverage"] - dis["small"]["coverage"]
        c.check("small_coverage", gap >= 0.0,
                f"salience={sal['small']['coverage']:.4f},discrete={dis['small']['coverage']:.4f},gap={gap:+.4f}")
        for cls in ("medium", "large"):
            c.check(f"{cls}(info)", True, f"{sal[cls]['coverage']:.3f}vs{dis[cls]['coverage']:.3f}")


@pytest.mark.slow
def test_loss_moving_average_decreases(salience_run, discrete_run):
    for run in (salience_run, discrete_run):
        ma = np.convolve(run.result.losses, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(ma) < 0)


# 9 ---------------------------------------------------------------------

def test_criterion_9_refinement_goldens():
    rng = np.random.default_rng(9)
    with criterion(9, "refinement goldens", 30.0) as c:
        block = BlockParams.init(8, 4, rng=rng)
        for t in (block.k3, block.shift3, block.k1, block.shift1):
            t.data[:] = 0.0
        x = rng.normal(size=(8, 5, 5))
        c.check("pure_residual", np.array_equal(repvgg_plux_block(x, block).data, x))

        block = BlockParams.init(8, 4, rng=rng)
        for t in (block.fc1_w, block.fc1_b, block.fc2_w, block.fc2_b):
            t.data[:] = 0.0
        a = block.alpha.data[0]
        f_m = np.maximum(a * T.grouped_conv2d(x, block.k3, 4).data + (1 - a) * T.grouped_conv2d(x, block.k1, 4).data, 0)
        gap = float(np.max(np.abs(repvgg_plux_block(x, block).data - (0.5 * f_m + x))))
        c.check("gate_half", gap < 1e-14, f"{gap:.1e}")

        shapes = [(8, 8), (4, 4), (2, 2), (1, 1)]
        emb = BackgroundEmbedding.init(8, 16, "absolute", rng)
        rows = embedding_rows(emb, shapes).data
        bad = 0
        for _ in range(100):
            ratios = FilterRatios(rng.random(4), rng.random(int(rng.integers(1, 4))))
            plan = select_queries([rng.random(s) for s in shapes], ratios)
            q = rng.normal(size=(85, 16))
            out = apply_background_embedding(q, plan, rows).data
            omega = plan.omega(plan.num_layers - 1)
            rest = np.setdiff1d(np.arange(85), omega)
            bad += out[omega].tobytes() != q[omega].tobytes() or not np.array_equal(out[rest], q[rest] + rows[rest])
        c.check("complement_rows_only_100", bad == 0, f"{bad} violations")
