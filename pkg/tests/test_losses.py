import numpy as np
import pytest

from moveseg import losses, tensor as T
from moveseg.compose import Shift
from moveseg.losses import LossWeights
from moveseg.tensor import Tensor


def mask(arr):
    a = np.asarray(arr, np.float32)
    if a.ndim == 2:
        a = a[None]
    return Tensor(a)


class TestLossMin:
    def test_full_coverage_zero(self):
        out = losses.loss_min(mask(np.ones((4, 4))), 0.05)
        assert out.item() == pytest.approx(0.0, abs=1e-6)

    def test_empty_mask_full_deficit(self):
        out = losses.loss_min(mask(np.zeros((4, 4))), 0.05)
        assert out.item() == pytest.approx(0.05, abs=1e-6)

    def test_linear_hinge(self):
        m = np.zeros((10, 10), np.float32)
        m[0, :2] = 1.0  # coverage 0.02
        out = losses.loss_min(mask(m), 0.05)
        assert out.item() == pytest.approx(0.03, abs=1e-6)

    def test_gradient_is_constant_below_threshold(self):
        m = Tensor(np.full((2, 4, 4), 0.01), requires_grad=True,
                   dtype=np.float64)
        with T.tape():
            T.backward(losses.loss_min(m, 0.05))
        # -1/(n*HW) for under-covered images
        assert np.allclose(m.grad, -1.0 / (2 * 16))

    def test_gradient_zero_above_threshold(self):
        m = Tensor(np.full((1, 4, 4), 0.5), requires_grad=True,
                   dtype=np.float64)
        with T.tape():
            T.backward(losses.loss_min(m, 0.05))
        assert m.grad is None or np.allclose(m.grad, 0.0)


class TestLossBin:
    def test_binary_zero(self):
        m = mask((np.arange(16).reshape(4, 4) % 2).astype(np.float32))
        assert losses.loss_bin(m).item() == pytest.approx(0.0, abs=1e-7)

    def test_half_peak(self):
        assert losses.loss_bin(mask(np.full((4, 4), 0.5))).item() \
            == pytest.approx(0.5, abs=1e-6)

    def test_two_pixel_example(self):
        out = losses.loss_bin(mask(np.array([[0.2, 0.9]])))
        assert out.item() == pytest.approx(0.15, abs=1e-6)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = losses.loss_bin(mask(rng.random((6, 6)))).item()
            assert 0.0 <= v <= 0.5


class TestPooledLosses:
    def test_block_aligned_binary_zero_bin(self):
        blocks = np.kron(np.array([[1, 0], [0, 1]], np.float32),
                         np.ones((4, 4), np.float32))
        pooled = losses.pooled_mask_losses(mask(blocks), [Shift(0, 0)], 4,
                                           0.05)
        # maxpool of a block-aligned binary mask stays binary
        grid = blocks.reshape(2, 4, 2, 4).max(axis=(1, 3))
        assert np.all((grid == 0) | (grid == 1))
        # avgpool is binary too for block-constant masks, so L_bin vanishes
        assert pooled.bin_pooled.item() == pytest.approx(0.0, abs=1e-7)

    def test_single_soft_pixel_maxpool_contribution(self):
        m = np.zeros((4, 4), np.float32)
        m[1, 2] = 0.4
        pooled = losses.pooled_mask_losses(mask(m), [Shift(0, 0)], 4, 0.05,
                                           use_avgpool=False, source="mask")
        assert pooled.bin_pooled.item() == pytest.approx(0.4, abs=1e-6)

    def test_maxpool_bin_gradient_hits_only_max_pixel(self):
        rng = np.random.default_rng(1)
        vals = rng.uniform(0.0, 0.49, size=(1, 4, 4)).astype(np.float64)
        m = Tensor(vals, requires_grad=True, dtype=np.float64)
        with T.tape():
            pooled = losses.pooled_mask_losses(m, [Shift(0, 0)], 4, 0.05,
                                               use_avgpool=False,
                                               source="mask")
            T.backward(pooled.bin_pooled)
        nz = np.nonzero(m.grad)
        assert len(nz[0]) == 1
        assert nz[1][0] == np.unravel_index(np.argmax(vals[0]), (4, 4))[0]

    def test_indivisible_error(self):
        with pytest.raises(ValueError):
            losses.pooled_mask_losses(mask(np.ones((6, 6))), [Shift(0, 0)],
                                      4, 0.05)


class TestHinge:
    def logits(self, vals):
        return Tensor(np.asarray(vals, np.float32))

    def test_satisfied_margins(self):
        out = losses.loss_adv_d(self.logits([1.0]), self.logits([-1.0]))
        assert out.item() == pytest.approx(0.0, abs=1e-6)

    def test_zero_logits(self):
        out = losses.loss_adv_d(self.logits([0.0]), self.logits([0.0]))
        assert out.item() == pytest.approx(2.0, abs=1e-6)

    def test_oversatisfied_clamp(self):
        out = losses.loss_adv_d(self.logits([2.0]), self.logits([-3.0]))
        assert out.item() == pytest.approx(0.0, abs=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            out = losses.loss_adv_d(self.logits(rng.normal(size=3)),
                                    self.logits(rng.normal(size=3)))
            assert out.item() >= 0.0

    def test_empty_set_error(self):
        with pytest.raises(ValueError):
            losses.loss_adv_d(self.logits([]), self.logits([0.0]))

    def test_adv_s_examples(self):
        assert losses.loss_adv_s(self.logits([0.7])).item() \
            == pytest.approx(-0.7, abs=1e-6)
        assert losses.loss_adv_s(self.logits([1.0, -1.0])).item() \
            == pytest.approx(0.0, abs=1e-6)

    def test_adv_s_shift_linearity(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=4).astype(np.float32)
        base = losses.loss_adv_s(self.logits(v)).item()
        shifted = losses.loss_adv_s(self.logits(v + 2.5)).item()
        assert shifted == pytest.approx(base - 2.5, abs=1e-5)


class TestRampAndTotal:
    def test_ramp_values(self):
        assert losses.lambda_bin_ramp(0) == 0.0
        assert losses.lambda_bin_ramp(2500) == pytest.approx(12.5)
        assert losses.lambda_bin_ramp(1250) == pytest.approx(6.25)
        assert losses.lambda_bin_ramp(10 ** 6) == pytest.approx(12.5)

    def test_total_zero_components(self):
        zero = Tensor(np.zeros((), np.float32))
        pooled = losses.PooledLosses(zero, zero)
        out = losses.total_segmenter_loss(zero, zero, zero, pooled,
                                          LossWeights(), 100)
        assert out.item() == pytest.approx(0.0)

    def test_total_weighted_min(self):
        zero = Tensor(np.zeros((), np.float32))
        lmin = Tensor(np.asarray(0.03, np.float32))
        pooled = losses.PooledLosses(zero, zero)
        out = losses.total_segmenter_loss(zero, lmin, zero, pooled,
                                          LossWeights(lambda_min=100.0), 0)
        assert out.item() == pytest.approx(3.0, abs=1e-5)

    def test_bin_inactive_at_iter_zero(self):
        zero = Tensor(np.zeros((), np.float32))
        lbin = Tensor(np.asarray(0.5, np.float32))
        pooled = losses.PooledLosses(zero, zero)
        out = losses.total_segmenter_loss(zero, zero, lbin, pooled,
                                          LossWeights(), 0)
        assert out.item() == pytest.approx(0.0)


class TestReconMSE:
    def test_equal_is_zero(self):
        x = Tensor(np.random.default_rng(4).random((1, 3, 8, 8),
                                                   dtype=np.float32))
        mp = np.ones((1, 4), np.float32)
        assert losses.recon_mse(x, x, mp, 4).item() == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(5)
        t = rng.random((1, 3, 8, 8)).astype(np.float32)
        p = t + 0.1
        out = losses.recon_mse(Tensor(p), Tensor(t), np.ones((1, 4)), 4)
        assert out.item() == pytest.approx(0.01, abs=1e-5)

    def test_ignores_unmasked_errors(self):
        rng = np.random.default_rng(6)
        t = rng.random((1, 3, 8, 8)).astype(np.float32)
        p = t.copy()
        mp = np.array([[1, 0, 0, 0]], np.float32)  # only top-left tile counts
        p[:, :, 4:, :] += 100.0  # bottom tiles corrupted
        p[:, :, :4, 4:] += 100.0
        out = losses.recon_mse(Tensor(p), Tensor(t), mp, 4)
        assert out.item() == pytest.approx(0.0, abs=1e-6)

    def test_empty_mask_error(self):
        x = Tensor(np.zeros((1, 3, 8, 8), np.float32))
        with pytest.raises(ValueError):
            losses.recon_mse(x, x, np.zeros((1, 4)), 4)


class TestGradChecks:
    @pytest.mark.parametrize("seed", range(3))
    def test_loss_min_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        m = Tensor(rng.uniform(0.0, 0.03, (1, 4, 4)), requires_grad=True,
                   dtype=np.float64)
        assert T.grad_check(lambda t: losses.loss_min(t, 0.05), m) < 1e-7

    @pytest.mark.parametrize("seed", range(3))
    def test_loss_bin_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        # keep away from the min kink at 0.5
        vals = rng.uniform(0.05, 0.42, (1, 4, 4))
        m = Tensor(vals, requires_grad=True, dtype=np.float64)
        assert T.grad_check(losses.loss_bin, m) < 1e-7

    def test_hinge_gradcheck(self):
        rng = np.random.default_rng(7)
        r = Tensor(rng.normal(size=4) * 2, requires_grad=True,
                   dtype=np.float64)
        f = Tensor(rng.normal(size=4) * 2, dtype=np.float64)
        assert T.grad_check(lambda t: losses.loss_adv_d(t, f), r) < 1e-6

    def test_bce_gradcheck(self):
        rng = np.random.default_rng(8)
        p = Tensor(rng.uniform(0.1, 0.9, (2, 3, 3)), requires_grad=True,
                   dtype=np.float64)
        t = Tensor((rng.random((2, 3, 3)) > 0.5).astype(np.float64))
        assert T.grad_check(lambda x: losses.bce(x, t), p) < 1e-6
