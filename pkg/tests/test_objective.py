import math

import numpy as np
import pytest

from myoseg.errors import ParameterError, ShapeError
from myoseg.gradcheck import central_diff, rel_error
from myoseg.objective import (dice_coefficient, dice_loss, jaccard_loss, mae,
                              mse)
from myoseg.tensor import RngStream

SMOOTH = 1e-6


def jaccard_oracle(pred, truth, smooth=SMOOTH):
    """Plain-Python summation, independent of the vectorized path."""
    inter = math.fsum(float(p) * float(t)
                      for p, t in zip(pred.ravel(), truth.ravel()))
    p_sum = math.fsum(float(p) for p in pred.ravel())
    t_sum = math.fsum(float(t) for t in truth.ravel())
    return 1.0 - (inter + smooth) / (p_sum + t_sum - inter + smooth)


def dice_oracle(pred, truth, smooth=SMOOTH):
    inter = math.fsum(float(p) * float(t)
                      for p, t in zip(pred.ravel(), truth.ravel()))
    p_sum = math.fsum(float(p) for p in pred.ravel())
    t_sum = math.fsum(float(t) for t in truth.ravel())
    return 1.0 - (2.0 * inter + smooth) / (p_sum + t_sum + smooth)


def random_pair(rng, max_side=8):
    h = 1 + rng.integers(max_side)
    w = 1 + rng.integers(max_side)
    pred = rng.uniform((h, w), 0.0, 1.0, dtype=np.float64)
    truth = (rng.uniform((h, w), 0.0, 1.0, dtype=np.float64) > 0.5) \
        .astype(np.float64)
    return pred, truth


class TestJaccardLoss:
    def test_perfect_overlap(self):
        m = (RngStream(1).uniform((6, 6), 0, 1, dtype=np.float64) > 0.4) \
            .astype(np.float64)
        assert m.sum() > 0
        assert jaccard_loss(m, m).value == pytest.approx(0.0, abs=1e-6)

    def test_disjoint(self):
        pred = np.zeros((4, 4))
        pred[0, 0] = 1.0
        truth = np.zeros((4, 4))
        truth[3, 3] = 1.0
        assert jaccard_loss(pred, truth).value == pytest.approx(1.0, abs=1e-6)

    def test_half_truth_closed_form(self):
        # pred 0.5 everywhere, truth on half: I=N/4, U=3N/4 -> loss 2/3
        pred = np.full((4, 8), 0.5)
        truth = np.zeros((4, 8))
        truth[:, :4] = 1.0
        loss = jaccard_loss(pred, truth)
        assert loss.value == pytest.approx(2.0 / 3.0, abs=1e-6)
        assert loss.value == pytest.approx(jaccard_oracle(pred, truth),
                                           abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            jaccard_loss(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_empty_masks_finite(self):
        loss = jaccard_loss(np.zeros((3, 3)), np.zeros((3, 3)))
        assert loss.value == pytest.approx(0.0)
        assert np.isfinite(loss.dprob).all()

    def test_gradient_finite_difference(self):
        rng = RngStream(2)
        pred = rng.uniform((3, 4), 0.05, 0.95, dtype=np.float64)
        truth = (rng.uniform((3, 4), 0, 1, dtype=np.float64) > 0.5) \
            .astype(np.float64)
        analytic = jaccard_loss(pred, truth).dprob
        numeric = central_diff(lambda: jaccard_loss(pred, truth).value, pred)
        assert rel_error(analytic, numeric) < 1e-6


class TestDiceLoss:
    def test_perfect_overlap(self):
        m = (RngStream(3).uniform((5, 5), 0, 1, dtype=np.float64) > 0.5) \
            .astype(np.float64)
        assert dice_loss(m, m).value == pytest.approx(0.0, abs=1e-6)

    def test_disjoint(self):
        pred = np.eye(4)
        truth = 1.0 - np.eye(4)
        assert dice_loss(pred, truth).value == pytest.approx(1.0, abs=1e-6)

    def test_half_truth_closed_form(self):
        pred = np.full((4, 8), 0.5)
        truth = np.zeros((4, 8))
        truth[:, :4] = 1.0
        assert dice_loss(pred, truth).value == pytest.approx(0.5, abs=1e-6)

    def test_gradient_finite_difference(self):
        rng = RngStream(4)
        pred = rng.uniform((3, 4), 0.05, 0.95, dtype=np.float64)
        truth = (rng.uniform((3, 4), 0, 1, dtype=np.float64) > 0.5) \
            .astype(np.float64)
        analytic = dice_loss(pred, truth).dprob
        numeric = central_diff(lambda: dice_loss(pred, truth).value, pred)
        assert rel_error(analytic, numeric) < 1e-6


class TestLossProperties:
    def test_oracle_equivalence_random_pairs(self):
        rng = RngStream(5)
        for _ in range(300):
            pred, truth = random_pair(rng)
            assert jaccard_loss(pred, truth).value == pytest.approx(
                jaccard_oracle(pred, truth), abs=1e-10)
            assert dice_loss(pred, truth).value == pytest.approx(
                dice_oracle(pred, truth), abs=1e-10)

    def test_jaccard_dominates_dice(self):
        rng = RngStream(6)
        for _ in range(200):
            pred, truth = random_pair(rng)
            assert jaccard_loss(pred, truth).value \
                >= dice_loss(pred, truth).value - 1e-12

    def test_permutation_invariance(self):
        rng = RngStream(7)
        pred, truth = random_pair(rng)
        perm = rng.permutation(pred.size)
        pred_p = pred.ravel()[perm].reshape(pred.shape)
        truth_p = truth.ravel()[perm].reshape(truth.shape)
        assert jaccard_loss(pred, truth).value == pytest.approx(
            jaccard_loss(pred_p, truth_p).value, abs=1e-12)
        assert dice_loss(pred, truth).value == pytest.approx(
            dice_loss(pred_p, truth_p).value, abs=1e-12)

    def test_values_in_unit_interval(self):
        rng = RngStream(8)
        for _ in range(100):
            pred, truth = random_pair(rng)
            for loss in (jaccard_loss, dice_loss):
                v = loss(pred, truth).value
                assert 0.0 <= v <= 1.0


class TestDiceCoefficient:
    def test_identical(self):
        m = (RngStream(9).uniform((6, 6), 0, 1) > 0.5).astype(np.float32)
        assert m.sum() > 0
        assert dice_coefficient(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((3, 3))
        a[0, 0] = 1
        b = np.zeros((3, 3))
        b[2, 2] = 1
        assert dice_coefficient(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4))
        a[0, :4] = 1
        b = np.zeros((4, 4))
        b[0, 2:] = 1
        b[1, :2] = 1
        assert dice_coefficient(a, b) == 0.5

    def test_both_empty(self):
        assert dice_coefficient(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_symmetry(self):
        rng = RngStream(10)
        a = (rng.uniform((8, 8), 0, 1) > 0.6).astype(np.float64)
        b = (rng.uniform((8, 8), 0, 1) > 0.6).astype(np.float64)
        assert dice_coefficient(a, b) == dice_coefficient(b, a)

    def test_non_binary_rejected(self):
        with pytest.raises(ParameterError):
            dice_coefficient(np.full((2, 2), 0.5), np.zeros((2, 2)))


class TestPixelMetrics:
    def test_zero_when_equal(self):
        m = (RngStream(11).uniform((5, 5), 0, 1) > 0.5).astype(np.float64)
        assert mse(m, m) == 0.0
        assert mae(m, m) == 0.0

    def test_half_prediction(self):
        truth = (RngStream(12).uniform((6, 6), 0, 1) > 0.3).astype(np.float64)
        pred = np.full((6, 6), 0.5)
        assert mse(pred, truth) == pytest.approx(0.25)
        assert mae(pred, truth) == pytest.approx(0.5)

    def test_zero_prediction_fraction(self):
        truth = np.zeros((10, 10))
        truth[:3] = 1.0  # fraction f = 0.3
        pred = np.zeros((10, 10))
        assert mse(pred, truth) == pytest.approx(0.3)
        assert mae(pred, truth) == pytest.approx(0.3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(np.zeros((2, 2)), np.zeros((3, 2)))
