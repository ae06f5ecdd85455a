"""Loss values against hand-computed oracles, and gradient checks."""

import math

import numpy as np
import pytest

from btunet.engine import Tensor
from btunet.errors import ShapeError
from btunet.losses import BCE_EPS, DICE_SMOOTH, bce_loss, combined_loss, dice_loss
from btunet.metrics import confusion, dice_coefficient

from gradutils import fd_gradient, rel_error

RNG = np.random.default_rng(40)


def check_loss_gradient(loss_fn, y, p0):
    p = Tensor(p0.copy(), requires_grad=True)
    loss_fn(y, p).backward()
    numeric = fd_gradient(lambda a: float(loss_fn(y, Tensor(a)).item()), p0)
    err = rel_error(p.grad, numeric)
    assert err <= 1e-3, f"rel err {err:.2e}"


class TestBceLoss:
    def test_single_pixel_half_confidence(self):
        assert bce_loss(np.ones(1), Tensor(np.array([0.5]))).item() == pytest.approx(
            math.log(2.0), abs=1e-9
        )

    def test_perfect_prediction_is_clamp_scale(self):
        y = (RNG.random((4, 4)) > 0.5).astype(np.float64)
        assert bce_loss(y, Tensor(y.copy())).item() < 1e-6

    def test_two_pixel_hand_value(self):
        loss = bce_loss(np.array([1.0, 0.0]), Tensor(np.array([0.9, 0.2])))
        expected = (-math.log(0.9) - math.log(0.8)) / 2
        assert loss.item() == pytest.approx(expected, abs=1e-9)
        assert loss.item() == pytest.approx(0.164252, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            bce_loss(np.ones(3), Tensor(np.full(4, 0.5)))

    def test_non_binary_mask_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(np.full(3, 0.5), Tensor(np.full(3, 0.5)))

    def test_out_of_range_prediction_rejected(self):
        with pytest.raises(ValueError):
            bce_loss(np.ones(2), Tensor(np.array([0.5, 1.2])))

    def test_gradient(self):
        y = (RNG.random(12) > 0.4).astype(np.float64)
        check_loss_gradient(bce_loss, y, RNG.uniform(0.05, 0.95, 12))


class TestDiceLoss:
    def test_equality_gives_zero(self):
        y = (RNG.random((4, 4)) > 0.5).astype(np.float64)
        assert dice_loss(y, Tensor(y.copy())).item() == pytest.approx(0.0, abs=1e-6)

    def test_zero_overlap_gives_one(self):
        assert dice_loss(np.ones(8), Tensor(np.zeros(8))).item() == pytest.approx(1.0)

    def test_hand_value(self):
        loss = dice_loss(np.array([1.0, 1, 0, 0]), Tensor(np.array([1.0, 0, 0, 0])))
        assert loss.item() == pytest.approx(1.0 - 2.0 / 3.0, abs=1e-6)

    def test_bounded_unit_interval(self):
        for _ in range(25):
            y = (RNG.random(10) > 0.5).astype(np.float64)
            p = RNG.uniform(0, 1, 10)
            val = dice_loss(y, Tensor(p)).item()
            assert 0.0 <= val <= 1.0

    def test_gradient(self):
        y = (RNG.random(16) > 0.5).astype(np.float64)
        check_loss_gradient(dice_loss, y, RNG.uniform(0.05, 0.95, 16))

    def test_consistent_with_count_dice_on_binary_predictions(self):
        for _ in range(30):
            y = (RNG.random(20) > 0.5).astype(np.float64)
            p = (RNG.random(20) > 0.5).astype(np.float64)
            from_counts = dice_coefficient(confusion(y, p))
            from_loss = 1.0 - dice_loss(y, Tensor(p)).item()
            assert abs(from_counts - from_loss) <= 1e-5


class TestCombinedLoss:
    def test_perfect_prediction_near_zero(self):
        y = (RNG.random(9) > 0.5).astype(np.float64)
        assert combined_loss(y, Tensor(y.copy())).item() < 1e-6

    def test_hand_value_with_clamped_zeros(self):
        y = np.array([1.0, 1, 0, 0])
        p = np.array([1.0, 0, 0, 0])
        # oracle: direct formula with the same epsilon
        pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
        bce = float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))
        dice = 1.0 - 2.0 * float(y @ p) / (float(y @ y) + float(p @ p) + DICE_SMOOTH)
        expected = 0.5 * bce + 0.5 * dice
        got = combined_loss(y, Tensor(p)).item()
        assert got == pytest.approx(expected, rel=1e-12)
        assert bce == pytest.approx(4.0295, abs=1e-4)
        assert got == pytest.approx(2.1814, abs=1e-4)

    def test_complement_prediction_decomposes(self):
        y = (RNG.random(10) > 0.5).astype(np.float64)
        comp = 1.0 - y
        total = combined_loss(y, Tensor(comp)).item()
        assert total == pytest.approx(
            0.5 * bce_loss(y, Tensor(comp)).item() + 0.5 * 1.0, abs=1e-6
        )

    def test_gradient(self):
        y = (RNG.random(16) > 0.5).astype(np.float64)
        check_loss_gradient(combined_loss, y, RNG.uniform(0.05, 0.95, 16))

    def test_nonnegative(self):
        for _ in range(20):
            y = (RNG.random(8) > 0.5).astype(np.float64)
            assert combined_loss(y, Tensor(RNG.uniform(0, 1, 8))).item() >= 0.0
