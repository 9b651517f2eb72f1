import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tadml.autograd import Tape, Tensor, grad_check
from tadml.losses import (LevelTargets, assign_targets, beta_giou_loss, focal_loss, focal_terms,
                          giou_regression, level_ranges, total_loss)
from tadml.network import HeadOutput, ModelConfig, forward, init_params, level_geometry
from tadml.segments import GroundTruthInstance as GT, Segment


def level(labels, stride=1, valid=None):
    labels = np.asarray(labels)
    return LevelTargets(stride, labels, np.zeros((len(labels), 2)), labels >= 0,
                        np.ones(len(labels), bool) if valid is None else np.asarray(valid))


class TestAssign:
    def test_empty(self):
        t = assign_targets([], [(16, 2), (8, 4)])
        assert t.num_positive == 0
        assert all(np.all(lv.labels == -1) for lv in t)

    def test_single_gt_stride4(self):
        t = assign_targets([GT(Segment(8, 24), 1)], [(16, 4)])
        lv = t.levels[0]
        assert list(lv.centers[lv.positive]) == [10, 14, 18, 22]
        i = int(np.argmax(lv.positive))
        np.testing.assert_allclose(lv.offsets[i], [0.5, 3.5], rtol=0, atol=1e-15)
        assert np.all(lv.labels[lv.positive] == 1)

    def test_nested_shortest_wins(self):
        t = assign_targets([GT(Segment(0, 32), 0), GT(Segment(12, 20), 1)], [(32, 1)])
        lv = t.levels[0]
        assert set(lv.labels[12:20]) == {1}
        assert set(lv.labels[:12]) == {0}

    def test_ranges_route_by_reach(self):
        # a short action lands on the finest level only, a long one on coarser levels
        geo = level_geometry(128, 6)
        t = assign_targets([GT(Segment(10, 16), 0), GT(Segment(40, 120), 1)], geo)
        assert t.levels[0].positive.any() and not np.any(t.levels[0].labels == 1)
        assert np.all(t.levels[0].labels[t.levels[0].positive] == 0)
        assert not any(np.any(lv.labels == 0) for lv in t.levels[2:])
        assert any(np.any(lv.labels == 1) for lv in t.levels[3:])

    def test_level_ranges_open_top(self):
        assert level_ranges(3) == [(0, 4), (4, 8), (8, math.inf)]
        with pytest.raises(ValueError):
            level_ranges(7)

    def test_padding_is_invalid(self):
        t = assign_targets([GT(Segment(0, 64), 0)], [(32, 2)], valid_len=40)
        lv = t.levels[0]
        assert lv.valid.sum() == 20 and not lv.positive[20:].any()

    @given(st.lists(st.tuples(st.integers(0, 120), st.integers(1, 60), st.integers(0, 2)), max_size=6))
    @settings(max_examples=150, deadline=None)
    def test_positive_centres_inside_matched_gt(self, raw):
        gts = [GT(Segment(s, min(s + l, 128)), c) for s, l, c in raw if s + 1 <= 128 and s < min(s + l, 128)]
        t = assign_targets(gts, level_geometry(128, 6))
        assert t.num_positive == sum(int(lv.positive.sum()) for lv in t)
        for lv in t:
            for i in np.nonzero(lv.positive)[0]:
                ds, de = lv.offsets[i]
                assert ds >= 0 and de > 0
                c = lv.centers[i]
                s, e = c - ds * lv.stride, c + de * lv.stride
                assert any(abs(g.segment.start - s) < 1e-9 and abs(g.segment.end - e) < 1e-9
                           and g.class_id == lv.labels[i] for g in gts)


class TestFocal:
    def test_hand_value(self):
        loss, _ = focal_terms(np.array([0.0]), np.array([True]), 0.25, 2.0)
        assert abs(loss[0] - 0.25 * 0.25 * math.log(2)) < 1e-12

    def test_confident_positive(self):
        loss, _ = focal_terms(np.array([40.0]), np.array([True]), 0.25, 2.0)
        assert loss[0] < 1e-15

    def test_reduces_to_half_bce(self, rng):
        x = rng.standard_normal(50)
        y = rng.random(50) < 0.5
        loss, _ = focal_terms(x, y, 0.5, 0.0)
        p = 1 / (1 + np.exp(-x))
        bce = -(y * np.log(p) + (~y) * np.log(1 - p))
        np.testing.assert_allclose(loss, 0.5 * bce, rtol=1e-12)

    def test_monotone_and_non_negative(self):
        xs = np.linspace(-20, 20, 401)
        pos, _ = focal_terms(xs, np.ones_like(xs, bool), 0.25, 2.0)
        neg, _ = focal_terms(xs, np.zeros_like(xs, bool), 0.25, 2.0)
        assert np.all(pos >= 0) and np.all(neg >= 0)
        assert np.all(np.diff(pos) <= 0) and np.all(np.diff(neg) >= 0)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0])
    def test_gradient(self, rng, gamma):
        tgt = level([0, -1, 2, -1, 1], valid=[1, 1, 1, 1, 0])
        rep = grad_check(lambda p: focal_loss(p["x"], tgt, 0.25, gamma),
                         {"x": Tensor(2 * rng.standard_normal((5, 3)))}, tol=1e-6)
        assert rep.ok, rep.lines()

    def test_normalizer_and_mask(self):
        a = focal_loss(Tensor(np.zeros((4, 2))), level([-1, -1, -1, -1], valid=[1, 1, 0, 0])).item()
        b = focal_loss(Tensor(np.zeros((2, 2))), level([-1, -1], valid=[1, 1])).item()
        assert a == b

    def test_bad_params(self):
        with pytest.raises(ValueError):
            focal_loss(Tensor(np.zeros((1, 1))), level([-1]), alpha=1.5)


class TestGIoU:
    def test_identity(self):
        assert beta_giou_loss(Segment(2, 7), Segment(2, 7)) == 0.0

    def test_disjoint(self):
        assert abs(beta_giou_loss(Segment(0, 1), Segment(2, 3), 3.0) - (1 + (1 / 3) ** 3)) < 1e-9

    @pytest.mark.parametrize("beta", [1.0, 2.0, 3.0, 5.0])
    def test_interval_union(self, beta):
        assert abs(beta_giou_loss(Segment(0, 2), Segment(1, 3), beta) - 2 / 3) < 1e-9

    def test_rejects_empty_gt_and_small_beta(self):
        with pytest.raises(ValueError):
            beta_giou_loss(Segment(0, 1), Segment(1, 1))
        with pytest.raises(ValueError):
            beta_giou_loss(Segment(0, 1), Segment(0, 2), beta=0.5)

    def test_degenerate_prediction_is_clamped(self):
        assert math.isfinite(beta_giou_loss(Segment(3, 3), Segment(0, 4)))

    @given(st.floats(-50, 50), st.floats(0.01, 30), st.floats(-50, 50), st.floats(0.01, 30),
           st.floats(1, 6))
    @settings(max_examples=200, deadline=None)
    def test_range(self, a, la, b, lb, beta):
        v = beta_giou_loss(Segment(a, a + la), Segment(b, b + lb), beta)
        assert 0 <= v < 2

    def test_penalty_non_increasing_in_beta(self):
        betas = np.linspace(1, 8, 15)
        for gap in (0.5, 1.0, 4.0):
            vals = [beta_giou_loss(Segment(0, 1), Segment(1 + gap, 2 + gap), b) for b in betas]
            assert np.all(np.diff(vals) <= 1e-15)

    @pytest.mark.parametrize("beta", [1.0, 3.0])
    def test_regression_gradient(self, rng, beta):
        n = 6
        offs = rng.uniform(0.3, 3.0, (n, 2))
        tgt = LevelTargets(2, np.array([0, -1, 1, 0, -1, 2]), offs, np.array([1, 0, 1, 1, 0, 1], bool),
                           np.ones(n, bool))
        d = np.abs(offs + rng.uniform(-0.2, 0.2, (n, 2))) + 0.05
        rep = grad_check(lambda p: giou_regression(p["d"], tgt, beta), {"d": Tensor(d)}, tol=1e-6)
        assert rep.ok, rep.lines()


class TestTotal:
    def _heads(self, rng, geo, K=2):
        return [HeadOutput(Tensor(rng.standard_normal((n, K))), Tensor(rng.uniform(0.1, 3, (n, 2))), s)
                for n, s in geo]

    def test_zero_reg_weight(self, rng):
        geo = level_geometry(32, 2)
        t = assign_targets([GT(Segment(4, 12), 1)], geo)
        heads = self._heads(rng, geo)
        loss, br = total_loss(heads, t, lambda_reg=0.0)
        assert loss.item() == br["cls"]
        assert br["num_positive"] == t.num_positive > 0

    def test_no_positives(self, rng):
        geo = level_geometry(32, 2)
        loss, br = total_loss(self._heads(rng, geo), assign_targets([], geo))
        assert br["reg"] == 0.0 and br["num_positive"] == 0

    def test_algebra(self, rng):
        geo = level_geometry(64, 3)
        t = assign_targets([GT(Segment(4, 12), 1), GT(Segment(20, 60), 0)], geo)
        heads = self._heads(rng, geo)
        loss, br = total_loss(heads, t, lambda_cls=0.7, lambda_reg=1.3, beta=2.0)
        cls = sum(focal_loss(h.class_logits, lv).item() for h, lv in zip(heads, t))
        reg = sum(giou_regression(h.distances, lv, 2.0).item() for h, lv in zip(heads, t) if lv.positive.any())
        assert abs(br["cls"] - 0.7 * cls) < 1e-12
        assert abs(br["reg"] - 1.3 * reg / t.num_positive) < 1e-12
        assert abs(loss.item() - (br["cls"] + br["reg"])) < 1e-12

    def test_perfect_predictions(self):
        geo = level_geometry(64, 3)
        t = assign_targets([GT(Segment(4, 12), 1), GT(Segment(20, 60), 0)], geo)
        heads = []
        for (n, s), lv in zip(geo, t):
            logits = np.full((n, 2), -30.0)
            logits[lv.positive, lv.labels[lv.positive]] = 30.0
            heads.append(HeadOutput(Tensor(logits), Tensor(lv.offsets.copy()), s))
        loss, _ = total_loss(heads, t)
        assert loss.item() < 1e-3

    def test_toy_model_gradient(self, rng):
        cfg = ModelConfig(input_dim=8, width=8, num_levels=2, neck_stages=2, num_classes=2)
        p = init_params(cfg, 0, np.float64)
        x = rng.standard_normal((32, 8))
        t = assign_targets([GT(Segment(3, 9), 0), GT(Segment(14, 30), 1)], level_geometry(32, 2))

        def f(q):
            _, heads = forward(q, cfg, Tensor(x))
            return total_loss(heads, t)[0]

        rep = grad_check(f, p, tol=1e-4)
        assert rep.ok, rep.lines()

    def test_backward_runs(self, rng):
        geo = level_geometry(16, 2)
        heads = self._heads(rng, geo)
        for h in heads:
            h.class_logits.requires_grad = h.distances.requires_grad = True
        with Tape() as tape:
            loss, _ = total_loss(heads, assign_targets([GT(Segment(1, 5), 0)], geo))
        tape.backward(loss)
        assert heads[0].class_logits.grad is not None
