import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestseg.losses import LossConfig, bce_dice_loss, deep_supervision_loss, dice, dice_per_image, iou, iou_per_image
from nestseg.tensor import Tensor


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def reference_loss(pred, target, eps=1e-6):
    """Loop-based restatement of the hybrid loss, one image at a time."""
    total = 0.0
    for p, y in zip(pred, target):
        p, y = p.ravel(), y.ravel()
        ce = sum(yy * math.log(max(pp, eps)) for pp, yy in zip(p, y)) / (2 * len(p))
        d = 2 * float((y * p).sum()) / (y.sum() + p.sum() + eps)
        total += ce + d
    return -total / len(pred)


class TestLossValues:
    def test_perfect_is_minus_one(self):
        ones = np.ones((2, 1, 4, 4))
        assert bce_dice_loss(t(ones), ones).item() == pytest.approx(-1.0, abs=1e-6)

    def test_half_probability(self):
        ones = np.ones((1, 1, 4, 4))
        expected = -(0.5 * math.log(0.5) + 2 * 0.5 / 1.5)
        got = bce_dice_loss(t(np.full_like(ones, 0.5)), ones).item()
        assert got == pytest.approx(expected, abs=1e-6)
        assert got == pytest.approx(-0.320, abs=5e-4)

    @pytest.mark.parametrize("p", [1e-2, 1e-4, 1e-8])
    def test_empty_target_vanishing_prediction_tends_to_zero(self, p):
        zeros = np.zeros((1, 1, 8, 8))
        assert abs(bce_dice_loss(t(np.full_like(zeros, p)), zeros).item()) < 1e-12

    def test_matches_loop_reference(self, rng):
        pred = rng.uniform(0.01, 0.99, (3, 1, 5, 5))
        target = (rng.random((3, 1, 5, 5)) > 0.6).astype(float)
        assert bce_dice_loss(t(pred), target).item() == pytest.approx(reference_loss(pred, target), rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="shape"):
            bce_dice_loss(t(np.full((1, 1, 2, 2), 0.5)), np.ones((1, 1, 2, 3)))
        with pytest.raises(ValueError, match="binary"):
            bce_dice_loss(t(np.full((1, 1, 2, 2), 0.5)), np.full((1, 1, 2, 2), 0.3))

    def test_batch_duplication_invariant(self, rng):
        pred = rng.uniform(0.01, 0.99, (3, 1, 6, 6))
        target = (rng.random(pred.shape) > 0.5).astype(float)
        once = bce_dice_loss(t(pred), target).item()
        twice = bce_dice_loss(t(np.concatenate([pred, pred])), np.concatenate([target, target])).item()
        assert abs(once - twice) <= 1e-7

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 20))
    def test_decreases_along_interpolation_path(self, seed):
        rng = np.random.default_rng(seed)
        target = (rng.random((2, 1, 6, 6)) > 0.5).astype(float)
        target[:, 0, 0, 0] = 1.0  # keep some foreground in every image
        alphas = np.linspace(0.0, 0.98, 12)
        losses = [bce_dice_loss(t(0.5 + a * (target - 0.5)), target).item() for a in alphas]
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestDeepSupervision:
    def test_single_head(self, rng):
        pred = t(rng.uniform(0.1, 0.9, (2, 1, 4, 4)))
        y = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        assert deep_supervision_loss([pred], y).item() == bce_dice_loss(pred, y).item()

    def test_identical_heads(self, rng):
        pred = t(rng.uniform(0.1, 0.9, (2, 1, 4, 4)))
        y = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        agg = deep_supervision_loss([pred] * 4, y).item()
        assert agg == pytest.approx(bce_dice_loss(pred, y).item(), rel=1e-12)

    def test_custom_weights(self, rng):
        y = np.ones((1, 1, 2, 2))
        a, b = t(np.full(y.shape, 0.5)), t(np.ones(y.shape))
        cfg = LossConfig(ds_weights=(0.25, 0.75))
        expected = 0.25 * bce_dice_loss(a, y).item() + 0.75 * bce_dice_loss(b, y).item()
        assert deep_supervision_loss([a, b], y, cfg).item() == pytest.approx(expected)

    def test_weight_count_mismatch(self):
        y = np.ones((1, 1, 2, 2))
        with pytest.raises(ValueError, match="2 deep-supervision weights for 3 heads"):
            deep_supervision_loss([t(y)] * 3, y, LossConfig(ds_weights=(0.5, 0.5)))

    def test_no_heads(self):
        with pytest.raises(ValueError, match="at least one head"):
            deep_supervision_loss([], np.ones((1, 1, 2, 2)))

    @pytest.mark.parametrize("bad", [dict(smooth_epsilon=0.0), dict(ds_weights=(0.5, 0.6))])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            LossConfig(**bad)


class TestMetrics:
    def test_identical(self):
        m = np.zeros((1, 8, 8))
        m[0, 2:5, 2:6] = 1
        assert iou(m, m) == 1.0 and dice(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((1, 4, 4)), np.zeros((1, 4, 4))
        a[0, 0, 0], b[0, 3, 3] = 1, 1
        assert iou(a, b) == 0.0

    def test_half_subset(self):
        tgt = np.zeros((1, 4, 4))
        tgt[0, :2] = 1
        pred = np.zeros((1, 4, 4))
        pred[0, 0] = 1
        assert iou(pred, tgt) == 0.5
        assert dice(pred, tgt) == pytest.approx(2 / 3)

    def test_both_empty_is_perfect(self):
        z = np.zeros((2, 3, 3))
        assert iou(z, z) == 1.0 and dice(z, z) == 1.0

    def test_threshold_inclusive(self):
        pred = np.full((1, 2, 2), 0.5)
        assert iou(pred, np.ones((1, 2, 2))) == 1.0
        assert iou(pred, np.ones((1, 2, 2)), threshold=0.6) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 20))
    def test_iou_below_dice_and_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.random((5, 6, 6))
        tgt = (rng.random((5, 6, 6)) > rng.random()).astype(float)
        i, d = iou_per_image(pred, tgt), dice_per_image(pred, tgt)
        assert np.all((0 <= i) & (i <= d + 1e-12) & (d <= 1))
        perm = rng.permutation(5)
        assert iou(pred[perm], tgt[perm]) == pytest.approx(iou(pred, tgt))
