import numpy as np
import pytest

from bevlift import losses
from bevlift.tensor import NumericError, Tensor


LN2 = float(np.log(2.0))


def t(data):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class TestFocal:
    def test_zero_logits_single_positive(self):
        # p = 0.5 everywhere: positive cell contributes
        # alpha * (1-p)^gamma * (-log p) = 0.25 * 0.25 * ln2; each negative
        # contributes 0.75 * 0.25 * ln2; normalizer = 1 positive
        targets = np.zeros((1, 2, 2), dtype=np.float32)
        targets[0, 0, 0] = 1.0
        loss = losses.focal_loss(t(np.zeros((1, 2, 2))), targets)
        expect = 0.25 * 0.25 * LN2 + 3 * 0.75 * 0.25 * LN2
        assert loss.item() == pytest.approx(expect, abs=1e-6)

    def test_all_negative_normalizer_floor(self):
        targets = np.zeros((1, 2, 2), dtype=np.float32)
        loss = losses.focal_loss(t(np.zeros((1, 2, 2))), targets)
        # normalizer floors at 1, so the sum is not divided
        assert loss.item() == pytest.approx(4 * 0.75 * 0.25 * LN2, abs=1e-6)

    def test_confident_correct_is_small(self):
        targets = np.ones((1, 1, 1), dtype=np.float32)
        hi = losses.focal_loss(t(np.full((1, 1, 1), -5.0)), targets).item()
        lo = losses.focal_loss(t(np.full((1, 1, 1), 5.0)), targets).item()
        assert lo < 1e-3 < hi

    def test_explicit_normalizer(self):
        targets = np.ones((1, 1, 1), dtype=np.float32)
        l1 = losses.focal_loss(t(np.zeros((1, 1, 1))), targets).item()
        l4 = losses.focal_loss(t(np.zeros((1, 1, 1))), targets,
                               normalizer=4.0).item()
        assert l1 == pytest.approx(4.0 * l4, abs=1e-7)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            losses.focal_loss(t(np.zeros((1, 2, 2))), np.zeros((1, 3, 3)))


class TestSmoothL1:
    def test_values_inside_and_outside(self):
        # residual 0.5 -> 0.125 per channel; residual 2.0 -> 1.5
        pred = t(np.full((5, 1, 1), 0.5))
        target = np.zeros((5, 1, 1), dtype=np.float32)
        mask = np.ones((1, 1), dtype=np.float32)
        assert losses.smooth_l1_loss(pred, target, mask).item() == \
            pytest.approx(5 * 0.125, abs=1e-6)
        pred2 = t(np.full((5, 1, 1), 2.0))
        assert losses.smooth_l1_loss(pred2, target, mask).item() == \
            pytest.approx(5 * 1.5, abs=1e-6)

    def test_only_positive_cells_count(self):
        pred = t(np.ones((5, 2, 2)))
        target = np.zeros((5, 2, 2), dtype=np.float32)
        mask = np.zeros((2, 2), dtype=np.float32)
        mask[0, 0] = 1.0
        # one positive cell, residual 1.0 -> 0.5 per channel
        assert losses.smooth_l1_loss(pred, target, mask).item() == \
            pytest.approx(2.5, abs=1e-6)

    def test_no_positives_raises(self):
        with pytest.raises(ValueError):
            losses.smooth_l1_loss(t(np.zeros((5, 2, 2))), np.zeros((5, 2, 2)),
                                  np.zeros((2, 2)))


class TestDirection:
    def test_equal_logits_give_ln2(self):
        logits = t(np.zeros((2, 2, 2)))
        bins = np.zeros((2, 2), dtype=np.float32)
        mask = np.ones((2, 2), dtype=np.float32)
        assert losses.direction_loss(logits, bins, mask).item() == \
            pytest.approx(LN2, abs=1e-6)

    def test_correct_bin_low_loss(self):
        logits = np.zeros((2, 1, 1), dtype=np.float32)
        logits[1] = 6.0   # strongly predicts bin 1
        mask = np.ones((1, 1), dtype=np.float32)
        good = losses.direction_loss(t(logits), np.ones((1, 1)), mask).item()
        bad = losses.direction_loss(t(logits), np.zeros((1, 1)), mask).item()
        assert good < 0.01 < bad


class TestForeground:
    def test_sums_over_agents(self):
        mask = np.zeros((1, 2, 2), dtype=np.float32)
        mask[0, 0, 0] = 1.0
        one = losses.foreground_loss([t(np.zeros((1, 2, 2)))], mask).item()
        two = losses.foreground_loss([t(np.zeros((1, 2, 2))),
                                      t(np.zeros((1, 2, 2)))], mask).item()
        assert two == pytest.approx(2 * one, abs=1e-6)

    def test_scale_mismatch_raises(self):
        with pytest.raises(ValueError):
            losses.foreground_loss([t(np.zeros((1, 2, 2)))],
                                   np.zeros((1, 4, 4)))


class TestTotal:
    def test_fixed_weight_arithmetic(self):
        focal = t(np.float32(0.7))
        sl1 = t(np.float32(0.3))
        dirn = t(np.float32(0.11))
        fgs = [t(np.float32(0.2)), t(np.float32(0.4))]
        alphas = [0.4, 0.4]
        total, report = losses.total_loss(focal, sl1, dirn, fgs, alphas)
        expect = 0.7 + 2.0 * 0.3 + 0.2 * 0.11 + 0.4 * 0.2 + 0.4 * 0.4
        assert total.item() == pytest.approx(expect, abs=1e-6)
        assert report.total == pytest.approx(expect, abs=1e-6)
        recomputed = (report.focal + 2.0 * report.smooth_l1 + 0.2 * report.dir
                      + sum(a * f for a, f in zip(alphas, report.foreground)))
        assert report.total == pytest.approx(recomputed, abs=1e-6)

    def test_row_layout(self):
        total, report = losses.total_loss(t(1.0), t(2.0), t(3.0),
                                          [t(4.0)], [0.5])
        row = report.row()
        assert row == [report.focal, report.smooth_l1, report.dir,
                       report.foreground[0], report.total]

    def test_nonfinite_total_raises(self):
        with pytest.raises(NumericError):
            losses.total_loss(t(np.float32(np.nan)), t(0.0), t(0.0), [], [])

    def test_weights_are_constants(self):
        assert losses.SMOOTH_L1_WEIGHT == 2.0
        assert losses.DIR_WEIGHT == 0.2
