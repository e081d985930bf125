"""Dense-net core: gradients vs finite differences, Adam algebra, batching
consistency, cross-entropy oracles, checkpoint format round trips."""
import numpy as np
import pytest

from geodex import nn
from geodex.errors import (BadLabel, CheckpointError, LengthMismatch,
                           ShapeMismatch)

SPECS3 = ((7, 16, "relu"), (16, 16, "tanh"), (16, 4, "none"))


def make_net(seed=0, specs=SPECS3):
    return nn.net_init(specs, np.random.default_rng(seed))


class TestForward:
    def test_param_count(self):
        assert nn.param_count(SPECS3) == (7 * 16 + 16) + (16 * 16 + 16) + (16 * 4 + 4)
        net = make_net()
        assert net.params.size == nn.param_count(SPECS3)

    def test_init_bounds_and_zero_bias(self):
        net = make_net(3)
        w0 = net.params[:7 * 16]
        limit = np.sqrt(6.0 / (7 + 16))
        assert np.abs(w0).max() <= limit
        np.testing.assert_array_equal(net.params[7 * 16:7 * 16 + 16], 0.0)

    def test_single_equals_batch_row_exact_small(self):
        # batches of <= 4 rows take the einsum path: bit-equal to singles
        net = make_net(1)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 7))
        batch, _ = nn.net_forward(net, x)
        for i in range(4):
            single, _ = nn.net_forward(net, x[i])
            np.testing.assert_array_equal(single, batch[i])

    def test_large_batch_rows_close_and_stable(self):
        net = make_net(1)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((12, 7))
        batch, _ = nn.net_forward(net, x)
        for i in range(12):
            single, _ = nn.net_forward(net, x[i])
            np.testing.assert_allclose(single, batch[i], atol=1e-12)
        # BLAS row content must not depend on row order within the batch
        perm = np.random.default_rng(6).permutation(12)
        shuffled, _ = nn.net_forward(net, x[perm])
        np.testing.assert_array_equal(shuffled, batch[perm])

    def test_shape_errors(self):
        net = make_net()
        with pytest.raises(ShapeMismatch):
            nn.net_forward(net, np.zeros(8))
        with pytest.raises(ShapeMismatch):
            nn.net_init(((4, 8, "relu"), (9, 2, "none")),
                        np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            nn.net_init(((4, 8, "gelu"),), np.random.default_rng(0))

    def test_tanh_output_bounded(self):
        net = make_net(2, ((5, 32, "relu"), (32, 3, "tanh")))
        x = np.random.default_rng(0).standard_normal((20, 5)) * 50.0
        y, _ = nn.net_forward(net, x)
        assert np.abs(y).max() <= 1.0


class TestBackward:
    def test_gradient_matches_finite_differences(self):
        net = make_net(7)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 7))
        w = rng.standard_normal(4)  # fixed linear readout weights

        def loss_fn(params):
            p = nn.net_with_params(net, params)
            y, acts = nn.net_forward(p, x)
            loss = float(np.sum(y * w))
            grad, _ = nn.net_backward(p, acts, np.tile(w, (5, 1)))
            return loss, grad

        worst = nn.grad_check(loss_fn, net.params, samples=80,
                              rng=np.random.default_rng(9))
        assert worst < 1e-6

    def test_input_gradient(self):
        net = make_net(10)
        rng = np.random.default_rng(11)
        x = rng.standard_normal(7)
        w = rng.standard_normal(4)
        y, acts = nn.net_forward(net, x)
        _, gin = nn.net_backward(net, acts, w[None, :])
        step = 1e-6
        for i in range(7):
            dp = x.copy(); dp[i] += step
            dm = x.copy(); dm[i] -= step
            fd = (np.dot(nn.net_forward(net, dp)[0], w)
                  - np.dot(nn.net_forward(net, dm)[0], w)) / (2 * step)
            assert gin[0, i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_batch_grad_is_sum_of_rows(self):
        net = make_net(12)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 7))
        g = rng.standard_normal((3, 4))
        _, acts = nn.net_forward(net, x)
        batch_grad, _ = nn.net_backward(net, acts, g)
        total = np.zeros_like(net.params)
        for i in range(3):
            _, acts_i = nn.net_forward(net, x[i])
            row_grad, _ = nn.net_backward(net, acts_i, g[i][None, :])
            total += row_grad
        np.testing.assert_allclose(batch_grad, total, atol=1e-12)

    def test_output_grad_shape_checked(self):
        net = make_net()
        _, acts = nn.net_forward(net, np.zeros((2, 7)))
        with pytest.raises(ShapeMismatch):
            nn.net_backward(net, acts, np.zeros((2, 5)))


class TestCrossEntropy:
    def test_uniform_logits_log_c(self):
        loss, _ = nn.cross_entropy(np.zeros(10), 3)
        assert loss == pytest.approx(np.log(10.0), abs=1e-12)

    def test_grad_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(14)
        z = rng.standard_normal(6)
        loss, grad = nn.cross_entropy(z, 2)
        p = np.exp(z) / np.exp(z).sum()
        expect = p.copy(); expect[2] -= 1.0
        np.testing.assert_allclose(grad, expect, atol=1e-12)
        assert loss == pytest.approx(-np.log(p[2]), abs=1e-12)

    def test_shift_invariance(self):
        z = np.array([1.0, -2.0, 0.5, 3.0])
        a, _ = nn.cross_entropy(z, 1)
        b, _ = nn.cross_entropy(z + 1000.0, 1)
        assert a == pytest.approx(b, abs=1e-9)

    def test_batch_is_mean(self):
        rng = np.random.default_rng(15)
        z = rng.standard_normal((8, 5))
        labels = rng.integers(0, 5, 8)
        mean_loss, grad = nn.cross_entropy_batch(z, labels)
        singles = [nn.cross_entropy(z[i], labels[i]) for i in range(8)]
        assert mean_loss == pytest.approx(np.mean([s[0] for s in singles]))
        np.testing.assert_allclose(
            grad, np.stack([s[1] for s in singles]) / 8.0, atol=1e-12)

    def test_bad_label(self):
        with pytest.raises(BadLabel):
            nn.cross_entropy(np.zeros(4), 4)
        with pytest.raises(BadLabel):
            nn.cross_entropy_batch(np.zeros((2, 4)), np.array([0, -1]))


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        rng = np.random.default_rng(16)
        params = rng.standard_normal(20)
        grads = rng.standard_normal(20)
        state = nn.adam_init(20, lr=0.01)
        new, state2 = nn.adam_step(params, grads, state)
        # bias correction makes mhat/sqrt(vhat) = sign(g) on step 1 (eps aside)
        np.testing.assert_allclose(new, params - 0.01 * np.sign(grads),
                                   atol=1e-7)
        assert state2.step == 1

    def test_moment_recursions(self):
        params = np.zeros(3)
        g1 = np.array([1.0, -2.0, 0.5])
        g2 = np.array([-1.0, 1.0, 2.0])
        state = nn.adam_init(3, lr=0.1)
        _, s1 = nn.adam_step(params, g1, state)
        _, s2 = nn.adam_step(params, g2, s1)
        np.testing.assert_allclose(s2.m, 0.9 * (0.1 * g1) + 0.1 * g2)
        np.testing.assert_allclose(
            s2.v, 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2)

    def test_zero_grad_keeps_params(self):
        params = np.ones(4)
        state = nn.adam_init(4, lr=0.5)
        new, _ = nn.adam_step(params, np.zeros(4), state)
        np.testing.assert_array_equal(new, params)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            nn.adam_step(np.zeros(4), np.zeros(5), nn.adam_init(4, 0.1))


class TestCheckpoints:
    def sections(self):
        net = make_net(17)
        return {
            "net": net,
            "floats": np.arange(12.0).reshape(3, 4),
            "ints": np.array([3, 1, 4], dtype=np.int64),
            "blob": b"\x00\x01\x02 arbitrary",
        }

    def test_round_trip(self, tmp_path):
        path = tmp_path / "model.gdx"
        nn.save_checkpoint(path, "unit-test", self.sections())
        comp, loaded = nn.load_checkpoint(path)
        assert comp == "unit-test"
        orig = self.sections()
        assert loaded["net"].specs == orig["net"].specs
        np.testing.assert_array_equal(loaded["net"].params,
                                      orig["net"].params)
        np.testing.assert_array_equal(loaded["floats"], orig["floats"])
        assert loaded["floats"].dtype == np.float64
        np.testing.assert_array_equal(loaded["ints"], orig["ints"])
        assert loaded["blob"] == orig["blob"]

    def test_bytes_deterministic(self):
        a = nn.checkpoint_bytes("c", self.sections())
        b = nn.checkpoint_bytes("c", self.sections())
        assert a == b

    def test_component_check(self, tmp_path):
        path = tmp_path / "model.gdx"
        nn.save_checkpoint(path, "policy", self.sections())
        nn.load_checkpoint(path, expect_component="policy")
        with pytest.raises(CheckpointError):
            nn.load_checkpoint(path, expect_component="encoder")

    def test_corruption_detected(self):
        buf = nn.checkpoint_bytes("c", self.sections())
        with pytest.raises(CheckpointError):
            nn.parse_checkpoint(b"NOPE" + buf[4:])       # bad magic
        with pytest.raises(CheckpointError):
            nn.parse_checkpoint(buf[:len(buf) // 2])     # truncated
        bad_version = buf[:4] + b"\xff\xff\xff\xff" + buf[8:]
        with pytest.raises(CheckpointError):
            nn.parse_checkpoint(bad_version)


class TestGradCheckHarness:
    def test_flags_wrong_gradient(self):
        # quadratic with a deliberately corrupted gradient: rel err ~ 1
        def bad(params):
            return float(np.sum(params ** 2)), 2.0 * params + 1.0

        worst = nn.grad_check(bad, np.linspace(1.0, 2.0, 10), samples=10,
                              rng=np.random.default_rng(0))
        assert worst > 0.1

    def test_passes_correct_gradient(self):
        def good(params):
            return float(np.sum(params ** 3)), 3.0 * params ** 2

        worst = nn.grad_check(good, np.linspace(1.0, 2.0, 10), samples=10,
                              rng=np.random.default_rng(0))
        assert worst < 1e-6
