import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salience_filter import kernels
from salience_filter import tensor as T
from salience_filter.errors import ConfigurationError, ContractError
from salience_filter.geometry import BBox, grid_axis_coords
from salience_filter.supervision import (FocalParams, build_salience_targets, discrete_fg_targets,
                                       salience_confidence, salience_focal_loss)

SHAPES = [(32, 32), (16, 16), (8, 8), (4, 4)]
STRIDES = [8, 16, 32, 64]


class TestSalienceConfidence:
    box = BBox(100.0, 60.0, 40.0, 24.0)

    def test_center(self):
        assert salience_confidence((100.0, 60.0), self.box) == 1.0

    @pytest.mark.parametrize("sx, sy", [(-1, -1), (-1, 1), (1, -1), (1, 1)])
    def test_corners(self, sx, sy):
        assert salience_confidence((100.0 + sx * 20.0, 60.0 + sy * 12.0), self.box) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("point", [(120.0, 60.0), (80.0, 60.0), (100.0, 72.0), (100.0, 48.0)])
    def test_edge_midpoints(self, point):
        # sqrt(2 * (1/2)^2) = sqrt(0.5)
        assert salience_confidence(point, self.box) == pytest.approx(1.0 - math.sqrt(0.5), abs=1e-12)

    @pytest.mark.parametrize("point", [(120.5, 60.0), (100.0, 40.0), (0.0, 0.0)])
    def test_outside(self, point):
        assert salience_confidence(point, self.box) == 0.0

    @given(st.integers(4, 512), st.integers(4, 512), st.integers(4, 512), st.integers(4, 512),
           st.integers(-512, 512), st.integers(-512, 512), st.integers(0, 1000), st.integers(0, 1000))
    def test_scale_independent(self, w1, h1, w2, h2, kx, ky, c1, c2):
        ux, uy = kx / 1024, ky / 1024  # normalized offsets in [-1/2, 1/2]
        b1 = BBox(float(c1), float(c1 + 7), float(w1), float(h1))
        b2 = BBox(float(c2), float(c2 - 3), float(w2), float(h2))
        p1 = (b1.cx + ux * b1.w, b1.cy + uy * b1.h)
        p2 = (b2.cx + ux * b2.w, b2.cy + uy * b2.h)
        assert salience_confidence(p1, b1) == salience_confidence(p2, b2)

    @given(st.floats(0, 2 * math.pi), st.floats(1, 300), st.floats(1, 300))
    def test_monotone_along_rays(self, angle, w, h):
        box = BBox(0.0, 0.0, w, h)
        ts = np.linspace(0, 1, 40)
        vals = [salience_confidence((t * math.cos(angle) * w / 2, t * math.sin(angle) * h / 2), box) for t in ts]
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v <= 1.0 for v in vals)


def _random_boxes(rng, n):
    out = []
    for _ in range(n):
        w, h = rng.uniform(4, 160, 2)
        out.append(BBox(float(rng.uniform(0, 256)), float(rng.uniform(0, 256)), float(w), float(h)))
    return out


class TestSalienceTargets:
    def test_no_boxes(self):
        for m in build_salience_targets(SHAPES, STRIDES, []):
            assert not m.any()

    def test_single_cell_box_is_unique_maximum(self):
        maps = build_salience_targets(SHAPES, STRIDES, [BBox(12.0, 20.0, 4.0, 4.0)])
        level0 = maps[0]
        assert level0[1, 2] == 1.0
        assert np.count_nonzero(level0 == level0.max()) == 1
        assert np.count_nonzero(level0) == 1

    def test_small_and_large_peaks_match_nearest_grid_point(self):
        # centers on level-0 grid points (x = 4 + 8 i) -> both peaks are 1
        small = BBox(36.0, 36.0, 8.0, 8.0)
        large = BBox(164.0, 164.0, 64.0, 64.0)
        level0 = build_salience_targets(SHAPES[:1], STRIDES[:1], [small, large])[0]
        xs = grid_axis_coords(32, 8)
        for b in (small, large):
            inside = (np.abs(xs[:, None] - b.cx) <= b.w / 2) & (np.abs(xs[None, :] - b.cy) <= b.h / 2)
            i = int(np.argmin(np.abs(xs - b.cx)))
            j = int(np.argmin(np.abs(xs - b.cy)))
            assert level0[inside].max() == level0[i, j] == 1.0

    def test_peak_at_nearest_grid_point_random(self, rng):
        for _ in range(100):
            w, h = rng.uniform(8, 64, 2)
            b = BBox(float(rng.uniform(40, 200)), float(rng.uniform(40, 200)), float(w), float(h))
            m = build_salience_targets(SHAPES[:1], STRIDES[:1], [b])[0]
            xs = grid_axis_coords(32, 8)
            # nearest in normalized distance, which is what the confidence depends on
            d = 2 * ((xs[:, None] - b.cx) / b.w) ** 2 + 2 * ((xs[None, :] - b.cy) / b.h) ** 2
            i, j = np.unravel_index(np.argmin(d), d.shape)
            assert m.max() == m[i, j]

    def test_values_and_outside_zero(self, rng):
        boxes = _random_boxes(rng, 6)
        for (h, w), s, m in zip(SHAPES, STRIDES, build_salience_targets(SHAPES, STRIDES, boxes)):
            assert m.min() >= 0.0 and m.max() <= 1.0
            xs, ys = grid_axis_coords(h, s), grid_axis_coords(w, s)
            for i in range(h):
                for j in range(w):
                    expect = max(salience_confidence((xs[i], ys[j]), b) for b in boxes)
                    assert m[i, j] == expect

    def test_overlapping_boxes_take_max(self):
        a = BBox(100.0, 100.0, 80.0, 80.0)
        b = BBox(120.0, 100.0, 40.0, 40.0)
        m = build_salience_targets([(32, 32)], [8], [a, b])[0]
        xs = grid_axis_coords(32, 8)
        assert m[14, 12] == max(salience_confidence((xs[14], xs[12]), a), salience_confidence((xs[14], xs[12]), b))

    def test_mismatched_levels(self):
        with pytest.raises(ConfigurationError):
            build_salience_targets(SHAPES, STRIDES[:3], [])


def test_backends_agree_on_salience_maps(rng):
    boxes = np.array([(b.cx, b.cy, b.w, b.h) for b in _random_boxes(rng, 10)])
    xs = grid_axis_coords(32, 8)
    outs = [impl.salience_map(xs, xs, boxes) for impl in kernels.BACKENDS.values()]
    for o in outs[1:]:
        assert o.tobytes() == outs[0].tobytes()


class TestDiscreteTargets:
    def test_side_100_on_levels_0_and_1(self):
        maps = discrete_fg_targets(SHAPES, STRIDES, [BBox(128.0, 128.0, 100.0, 60.0)])
        assert [bool(m.any()) for m in maps] == [True, True, False, False]

    def test_side_300_on_levels_2_and_3(self):
        maps = discrete_fg_targets(SHAPES, STRIDES, [BBox(128.0, 128.0, 300.0, 300.0)])
        assert [bool(m.any()) for m in maps] == [False, False, True, True]

    def test_no_boxes(self):
        assert not any(m.any() for m in discrete_fg_targets(SHAPES, STRIDES, []))

    def test_binary_inside_box(self):
        m = discrete_fg_targets(SHAPES, STRIDES, [BBox(100.0, 100.0, 40.0, 40.0)])[0]
        assert set(np.unique(m)) == {0.0, 1.0}
        # x in [80, 120] -> i in 10..14 (x = 4 + 8 i)
        assert m[10:15, 10:15].all() and m.sum() == 25

    def test_interval_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            discrete_fg_targets(SHAPES, STRIDES, [], [(0, 1)])


def _loss(pred, target, params=FocalParams()):
    return salience_focal_loss([T.Tensor(np.atleast_2d(pred))], [np.atleast_2d(target)], params).item()


class TestFocalLoss:
    def test_perfect_prediction(self):
        assert _loss(np.ones((3, 3)), np.ones((3, 3))) == 0.0

    def test_half_half(self):
        # p_f = 0.5: 0.25 * 0.5^2 * ln 2
        assert _loss(0.5, 0.5) == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-15)
        assert _loss(0.5, 0.5) == pytest.approx(0.0433217, abs=1e-7)

    def test_confident_mistake_is_clamped(self):
        eps = 1e-12
        value = _loss(1.0, 0.0)
        assert math.isfinite(value)
        assert value == pytest.approx(0.25 * (1 - eps) ** 2 * -math.log(eps), rel=1e-12)

    def test_mean_over_levels(self):
        preds = [T.Tensor(np.full((2, 2), 0.5)), T.Tensor(np.full((1, 1), 0.5))]
        tgts = [np.full((2, 2), 0.5), np.ones((1, 1))]
        per = 0.25 * 0.25 * math.log(2.0)
        assert salience_focal_loss(preds, tgts).item() == pytest.approx((4 * per + per) / 5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            salience_focal_loss([T.Tensor(np.zeros((2, 2)))], [np.zeros((2, 3))])

    def test_bad_params(self):
        with pytest.raises(ConfigurationError):
            FocalParams(alpha=1.5)

    def test_gradient(self, rng):
        pred = T.parameter(rng.uniform(0.05, 0.95, (6, 6)))
        target = rng.uniform(0, 1, (6, 6))
        err = T.finite_difference_check(lambda: salience_focal_loss([pred], [target]), [pred], n_probes=30)
        assert err < 1e-6

    @pytest.mark.parametrize("theta", [0.0, 0.1, 0.3, 0.45, 0.55, 0.7, 0.9, 1.0])
    def test_per_position_minimizer(self, theta):
        # p_f is linear in the prediction, so the minimizer is the nearer of 0 and 1
        grid = np.linspace(0.0, 1.0, 201)
        values = [_loss(g, theta) for g in grid]
        best = grid[int(np.argmin(values))]
        assert best == (1.0 if theta > 0.5 else 0.0)

    @pytest.mark.parametrize("theta", [0.0, 1.0])
    def test_minimized_at_target_for_hard_labels(self, theta):
        grid = np.linspace(0.0, 1.0, 101)
        assert min(_loss(g, theta) for g in grid) == _loss(theta, theta) == 0.0
