"""Loss pieces against hand geometry, printed tables, and the raster oracle."""

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_box_pairs, raster_iou
from driftdet import sfg
from driftdet.errors import ConfigurationError, DimensionError
from driftdet.sfg import BoxXYXY, FocalerConfig, SlideConfig
from driftdet.tensor import Tensor

A = BoxXYXY(0, 0, 2, 2)
B = BoxXYXY(1, 1, 3, 3)


def boxes_strategy():
    def build(x1, y1, w, h):
        return BoxXYXY(x1, y1, x1 + w, y1 + h)

    return st.builds(build,
                     st.floats(-20, 20), st.floats(-20, 20),
                     st.floats(0.5, 10), st.floats(0.5, 10))


class TestBoxGeometry:
    def test_degenerate_rejected(self):
        with pytest.raises(DimensionError):
            BoxXYXY(0, 0, 0, 1)
        with pytest.raises(DimensionError):
            BoxXYXY(0, 2, 1, 1)

    def test_iou_identical(self):
        assert sfg.iou(A, A) == 1.0

    def test_iou_disjoint(self):
        assert sfg.iou(A, BoxXYXY(5, 5, 6, 6)) == 0.0

    def test_iou_hand_example(self):
        assert sfg.iou(A, B) == pytest.approx(1 / 7, abs=1e-15)

    def test_giou_identical(self):
        assert sfg.giou(A, A) == 1.0

    def test_giou_hand_example(self):
        assert sfg.giou(A, B) == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)
        assert sfg.giou(A, B) == pytest.approx(-5 / 63, abs=1e-15)

    def test_giou_far_separation_approaches_minus_one(self):
        far = BoxXYXY(1000, 1000, 1001, 1001)
        assert sfg.giou(BoxXYXY(0, 0, 1, 1), far) < -0.9

    @given(boxes_strategy(), boxes_strategy())
    @settings(max_examples=100, deadline=None)
    def test_giou_never_exceeds_iou_and_symmetry(self, a, b):
        assert sfg.giou(a, b) <= sfg.iou(a, b) + 1e-12
        assert sfg.iou(a, b) == pytest.approx(sfg.iou(b, a), abs=1e-12)
        assert sfg.giou(a, b) == pytest.approx(sfg.giou(b, a), abs=1e-12)
        assert 0.0 <= sfg.iou(a, b) <= 1.0
        assert -1.0 < sfg.giou(a, b) <= 1.0

    def test_giou_equals_iou_when_hull_equals_union(self):
        inner = BoxXYXY(0.5, 0.5, 1.5, 1.5)
        outer = BoxXYXY(0, 0, 2, 2)
        assert sfg.giou(inner, outer) == pytest.approx(sfg.iou(inner, outer), abs=1e-15)

    def test_raster_oracle_agreement(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for a, b in random_box_pairs(rng, 200):
            worst = max(worst, abs(sfg.iou(a, b) - raster_iou(a, b)))
        assert worst < 2e-2


class TestSlideWeight:
    CFG = SlideConfig(mu_policy="fixed", mu_fixed=0.5)

    def test_printed_table(self):
        assert sfg.slide_weight(0.3, 0.5, self.CFG) == 1.0
        assert sfg.slide_weight(0.45, 0.5, self.CFG) == pytest.approx(math.exp(-0.45), abs=1e-15)
        assert sfg.slide_weight(0.45, 0.5, self.CFG) == pytest.approx(0.6376, abs=1e-4)
        assert sfg.slide_weight(0.6, 0.5, self.CFG) == pytest.approx(math.exp(-0.6), abs=1e-15)
        assert sfg.slide_weight(0.6, 0.5, self.CFG) == pytest.approx(0.5488, abs=1e-4)

    def test_boundary_at_mu_minus_delta_is_inclusive(self):
        assert sfg.slide_weight(0.4, 0.5, self.CFG) == 1.0

    def test_printed_discontinuity_below_and_continuity_at_mu(self):
        eps = 1e-9
        jump = sfg.slide_weight(0.4 + eps, 0.5, self.CFG) - sfg.slide_weight(0.4, 0.5, self.CFG)
        assert abs(jump - (math.exp(-0.4) - 1.0)) < 1e-6  # a real jump
        below = sfg.slide_weight(0.5 - eps, 0.5, self.CFG)
        at = sfg.slide_weight(0.5, 0.5, self.CFG)
        assert abs(below - at) < 1e-8  # continuous at mu

    def test_v2_table(self):
        cfg = SlideConfig(mu_policy="fixed", mu_fixed=0.5, variant="slide-v2")
        assert sfg.slide_weight(0.3, 0.5, cfg) == 1.0
        assert sfg.slide_weight(0.45, 0.5, cfg) == pytest.approx(math.exp(0.5), abs=1e-15)
        assert sfg.slide_weight(0.6, 0.5, cfg) == pytest.approx(math.exp(0.4), abs=1e-15)

    def test_v2_continuous_at_mu(self):
        cfg = SlideConfig(mu_policy="fixed", mu_fixed=0.5, variant="slide-v2")
        eps = 1e-9
        assert abs(sfg.slide_weight(0.5 - eps, 0.5, cfg)
                   - sfg.slide_weight(0.5, 0.5, cfg)) < 1e-8

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigurationError):
            SlideConfig(variant="nope")

    def test_weights_always_positive(self):
        for x in np.linspace(0, 1, 101):
            for mu in np.linspace(0, 1, 11):
                assert sfg.slide_weight(float(x), float(mu), self.CFG) > 0


class TestSlideGiou:
    CFG = SlideConfig(mu_policy="fixed", mu_fixed=0.5)

    def test_identical_boxes_zero(self):
        for mu in (0.0, 0.5, 1.0):
            assert sfg.slide_giou(A, A, mu, self.CFG) == 0.0

    def test_hand_example(self):
        got = sfg.slide_giou(A, B, 0.5, self.CFG)
        assert got == pytest.approx(68 / 63, abs=1e-12)
        assert got == pytest.approx(1.0794, abs=1e-4)

    def test_weight_one_branch_equals_plain_giou_loss(self):
        # iou(A,B)=1/7 <= mu-0.1 for mu=0.5, so the weight is exactly 1
        assert sfg.slide_giou(A, B, 0.5, self.CFG) == 1.0 - sfg.giou(A, B)


class TestFocaler:
    CFG = FocalerConfig()

    def test_table(self):
        assert sfg.focaler_truncate(0.0, self.CFG) == 0.0
        assert sfg.focaler_truncate(0.475, self.CFG) == pytest.approx(0.5, abs=1e-12)
        assert sfg.focaler_truncate(1.2, self.CFG) == 1.0

    def test_continuous_at_bounds(self):
        eps = 1e-9
        assert abs(sfg.focaler_truncate(0.95 - eps, self.CFG)
                   - sfg.focaler_truncate(0.95 + eps, self.CFG)) < 1e-6

    @given(st.floats(-1, 3), st.floats(-1, 3))
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert sfg.focaler_truncate(lo, self.CFG) <= sfg.focaler_truncate(hi, self.CFG)

    def test_slope_on_linear_region(self):
        cfg = FocalerConfig(d=0.2, u=0.7)
        x0, x1 = 0.3, 0.6
        slope = (sfg.focaler_truncate(x1, cfg) - sfg.focaler_truncate(x0, cfg)) / (x1 - x0)
        assert slope == pytest.approx(1 / 0.5, abs=1e-12)

    def test_d_ge_u_rejected(self):
        with pytest.raises(ConfigurationError):
            FocalerConfig(d=0.5, u=0.5)


class TestMuEstimate:
    def test_identical_pairs_give_one(self):
        cfg = SlideConfig()
        assert sfg.mu_estimate([(A, A), (B, B)], cfg) == 1.0

    def test_two_pairs_mean(self):
        # contained boxes give exact ratios: 1/5 and 3/5
        p1 = (BoxXYXY(0, 0, 1, 1), BoxXYXY(0, 0, 1, 5))
        p2 = (BoxXYXY(0, 0, 5, 3), BoxXYXY(0, 0, 5, 5))
        assert sfg.iou(*p1) == pytest.approx(0.2, abs=1e-15)
        assert sfg.iou(*p2) == pytest.approx(0.6, abs=1e-15)
        assert sfg.mu_estimate([p1, p2], SlideConfig()) == pytest.approx(0.4, abs=1e-15)

    def test_fixed_policy_ignores_pairs(self):
        cfg = SlideConfig(mu_policy="fixed", mu_fixed=0.5)
        assert sfg.mu_estimate([(A, B)], cfg) == 0.5
        assert sfg.mu_estimate([], cfg) == 0.5

    def test_empty_batch_falls_back_and_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="driftdet.sfg"):
            mu = sfg.mu_estimate([], SlideConfig())
        assert mu == 0.5
        assert any("no matched pairs" in r.message for r in caplog.records)


class TestSfgLoss:
    SLIDE = SlideConfig(mu_policy="fixed", mu_fixed=0.5)
    FOC = FocalerConfig()

    def test_aligned_pairs_zero_loss(self):
        loss, bd = sfg.sfg_loss([(A, A), (B, B)], self.SLIDE, self.FOC)
        assert loss == 0.0
        assert all(p.sg_focaler == 0.0 for p in bd.pairs)

    def test_hand_example_saturates_to_one(self):
        loss, bd = sfg.sfg_loss([(A, B)], self.SLIDE, self.FOC)
        assert loss == 1.0
        assert bd.pairs[0].sg == pytest.approx(68 / 63, abs=1e-12)

    def test_empty_is_zero_with_empty_breakdown(self):
        loss, bd = sfg.sfg_loss([], self.SLIDE, self.FOC)
        assert loss == 0.0 and bd.pairs == []

    def test_breakdown_invariants_on_random_pairs(self):
        rng = np.random.default_rng(1)
        pairs = random_box_pairs(rng, 100)
        loss, bd = sfg.sfg_loss(pairs, SlideConfig(), self.FOC)
        assert 0.0 <= loss <= 1.0
        for p in bd.pairs:
            assert 0.0 <= p.iou <= 1.0
            assert -1.0 < p.giou <= 1.0
            assert p.giou <= p.iou + 1e-12
            assert p.sg >= 0.0
            assert 0.0 <= p.sg_focaler <= 1.0


class TestLossGraph:
    SLIDE = SlideConfig(mu_policy="fixed", mu_fixed=0.5)
    FOC = FocalerConfig()

    @staticmethod
    def to_tensor(boxes):
        arr = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)
        return Tensor(arr.T.reshape(1, 4, len(boxes), 1).copy(), requires_grad=True,
                      dtype=np.float64), arr

    def test_graph_matches_pure_float_route(self):
        rng = np.random.default_rng(2)
        pairs = random_box_pairs(rng, 50)
        preds, targets = zip(*pairs)
        pred_t, _ = self.to_tensor(list(preds))
        target = np.array([[b.x1, b.y1, b.x2, b.y2] for b in targets])
        for slide_cfg in (self.SLIDE, SlideConfig()):
            loss_t, bd = sfg.sfg_loss_graph(pred_t, target, slide_cfg, self.FOC)
            loss_f, bd_f = sfg.sfg_loss(list(pairs), slide_cfg, self.FOC)
            assert loss_t.item() == pytest.approx(loss_f, abs=1e-12)
            for g, f in zip(bd.pairs, bd_f.pairs):
                assert g.giou == pytest.approx(f.giou, abs=1e-12)
                assert g.weight == pytest.approx(f.weight, abs=1e-12)

    def test_giou_graph_matches_scalar_giou(self):
        rng = np.random.default_rng(3)
        pairs = random_box_pairs(rng, 64)
        preds, targets = zip(*pairs)
        pred_t, _ = self.to_tensor(list(preds))
        target = np.array([[b.x1, b.y1, b.x2, b.y2] for b in targets])
        g = sfg.giou_graph(pred_t, target).data[0, 0, :, 0]
        for i, (a, b) in enumerate(pairs):
            assert g[i] == pytest.approx(sfg.giou(a, b), abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(4)
        pairs = random_box_pairs(rng, 20)
        preds, targets = zip(*pairs)
        pred_t, pred_arr = self.to_tensor(list(preds))
        target = np.array([[b.x1, b.y1, b.x2, b.y2] for b in targets])
        base, _ = sfg.sfg_loss_graph(pred_t, target, SlideConfig(), self.FOC)
        shift = np.array([5.0, -3.0, 5.0, -3.0])
        pred_s = Tensor((pred_arr + shift).T.reshape(1, 4, len(pairs), 1).copy(),
                        dtype=np.float64)
        moved, _ = sfg.sfg_loss_graph(pred_s, target + shift, SlideConfig(), self.FOC)
        assert moved.item() == pytest.approx(base.item(), abs=1e-12)

    def test_uniform_scale_invariance(self):
        rng = np.random.default_rng(5)
        pairs = random_box_pairs(rng, 20)
        preds, targets = zip(*pairs)
        pred_t, pred_arr = self.to_tensor(list(preds))
        target = np.array([[b.x1, b.y1, b.x2, b.y2] for b in targets])
        base, _ = sfg.sfg_loss_graph(pred_t, target, SlideConfig(), self.FOC)
        pred_s = Tensor((pred_arr * 3.0).T.reshape(1, 4, len(pairs), 1).copy(),
                        dtype=np.float64)
        scaled, _ = sfg.sfg_loss_graph(pred_s, target * 3.0, SlideConfig(), self.FOC)
        assert scaled.item() == pytest.approx(base.item(), rel=1e-12)

    def test_both_stages_off_is_plain_mean_giou_loss(self):
        rng = np.random.default_rng(6)
        pairs = random_box_pairs(rng, 30)
        preds, targets = zip(*pairs)
        pred_t, _ = self.to_tensor(list(preds))
        target = np.array([[b.x1, b.y1, b.x2, b.y2] for b in targets])
        loss_t, _ = sfg.sfg_loss_graph(pred_t, target, SlideConfig(), self.FOC,
                                       use_slide=False, use_focaler=False)
        want = np.mean([1.0 - sfg.giou(a, b) for a, b in pairs])
        assert loss_t.item() == pytest.approx(want, abs=1e-12)
