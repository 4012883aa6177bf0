"""Tensor op semantics, spec examples, and finite-difference gradient checks."""

import math

import numpy as np
import pytest

from helpers import central_difference, check_gradients, param64, relative_error, weighted_sum
from moe_mamba import tensor as T
from moe_mamba.tensor import Tensor


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(eye, m).data, m.data)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_dtype_mismatch(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32))
        b = Tensor(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(ValueError, match="dtype"):
            T.matmul(a, b)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = param64(rng, 4, 5)
        b = param64(rng, 5, 3)
        err = check_gradients(lambda: T.sum_all(T.matmul(a, b)), {"a": a, "b": b})
        assert err < 1e-7

    def test_batched_gradient(self):
        rng = np.random.default_rng(8)
        a = param64(rng, 2, 3, 4)
        b = param64(rng, 4, 5)
        err = check_gradients(lambda: weighted_sum(T.matmul(a, b)), {"a": a, "b": b})
        assert err < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        assert np.allclose(out.data, 0.25)
        assert out.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_direct_evaluation(self):
        out = T.softmax(Tensor([1.0, 2.0, 3.0]))
        expected = np.exp([1.0, 2.0, 3.0])
        expected /= expected.sum()
        assert np.allclose(out.data, expected, atol=1e-12)
        assert np.allclose(out.data, [0.0900, 0.2447, 0.6652], atol=5e-5)

    def test_large_inputs_do_not_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [1.0, 0.0])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(50, 7)))
        out = T.softmax(x, axis=-1)
        assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_nan_input_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            T.softmax(Tensor([1.0, np.nan]))

    def test_sorted_sum_is_permutation_exact(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(20, 5))
        perm = rng.permutation(5)
        p = T.softmax(Tensor(x), sorted_sum=True).data
        p_perm = T.softmax(Tensor(x[:, perm]), sorted_sum=True).data
        assert np.array_equal(p[:, perm], p_perm)


class TestElementwise:
    def test_silu_zero(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0

    def test_softplus_zero_is_ln2(self):
        assert T.softplus(Tensor([0.0])).data[0] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_exp_gradient_at_one(self):
        x = Tensor([1.0], requires_grad=True)
        T.sum_all(T.exp(x)).backward()
        numeric = central_difference(lambda: float(np.exp(x.data[0])), x.data)
        assert relative_error(x.grad, numeric) < 1e-7
        assert x.grad[0] == pytest.approx(math.e, rel=1e-7)

    def test_broadcast_leading_dims(self):
        x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
        bias = Tensor(np.arange(4.0), requires_grad=True)
        out = T.add(x, bias)
        T.sum_all(out).backward()
        assert out.shape == (2, 3, 4)
        assert np.array_equal(bias.grad, np.full(4, 6.0))

    def test_broadcast_ambiguity_is_shape_error(self):
        with pytest.raises(ValueError, match="broadcast"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    @pytest.mark.parametrize("op", [T.exp, T.sigmoid, T.silu, T.softplus, T.negate])
    def test_unary_gradients(self, op):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = param64(rng, 3, 4)
            err = check_gradients(lambda: weighted_sum(op(x), seed), {"x": x})
            assert err < 1e-5, f"seed {seed}: relative error {err}"

    @pytest.mark.parametrize("op", [T.add, T.mul])
    def test_binary_gradients(self, op):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            a = param64(rng, 3, 4)
            b = param64(rng, 3, 4)
            err = check_gradients(lambda: weighted_sum(op(a, b), seed), {"a": a, "b": b})
            assert err < 1e-5

    def test_scale_gradient(self):
        rng = np.random.default_rng(1)
        x = param64(rng, 5)
        err = check_gradients(lambda: T.sum_all(T.scale(x, 2.5)), {"x": x})
        assert err < 1e-7


class TestRmsNorm:
    def test_all_ones_fixed_point(self):
        x = Tensor(np.ones((2, 4)))
        gain = Tensor(np.ones(4))
        out = T.rmsnorm(x, gain, eps=0.0)
        assert np.allclose(out.data, 1.0, atol=1e-15)

    def test_hand_arithmetic(self):
        out = T.rmsnorm(Tensor([3.0, 4.0]), Tensor([1.0, 1.0]), eps=0.0)
        expected = np.array([3.0, 4.0]) / math.sqrt(12.5)
        assert np.allclose(out.data, expected, atol=1e-12)
        assert np.allclose(out.data, [0.8485, 1.1314], atol=5e-5)

    def test_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            x = param64(rng, 2, 5)
            gain = param64(rng, 5, lo=0.5, hi=1.5)
            err = check_gradients(lambda: weighted_sum(T.rmsnorm(x, gain), seed),
                                  {"x": x, "gain": gain})
            assert err < 1e-6


def conv_reference(x, kernel, bias):
    """Direct O(L*k) loop; the oracle for the vectorized op."""
    batch, length, channels = x.shape
    k = kernel.shape[1]
    out = np.zeros_like(x)
    for b in range(batch):
        for t in range(length):
            for c in range(channels):
                acc = bias[c]
                for j in range(k):
                    if t - j >= 0:
                        acc += kernel[c, j] * x[b, t - j, c]
                out[b, t, c] = acc
    return out


class TestConv1d:
    def test_kernel_one_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(1, 6, 1))
        out = T.conv1d_depthwise_causal(x, Tensor([[1.0]]), Tensor([0.0]))
        assert np.array_equal(out.data, x.data)

    def test_pure_delay(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
        out = T.conv1d_depthwise_causal(x, Tensor([[0.0, 1.0]]), Tensor([0.0]))
        assert out.data.reshape(-1).tolist() == [0.0, 1.0, 2.0]

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 9, 3))
        kernel = rng.normal(size=(3, 4))
        bias = rng.normal(size=3)
        out = T.conv1d_depthwise_causal(Tensor(x), Tensor(kernel), Tensor(bias))
        assert np.array_equal(out.data, conv_reference(x, kernel, bias))

    def test_causality(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 8, 2))
        kernel = Tensor(rng.normal(size=(2, 4)))
        bias = Tensor(rng.normal(size=2))
        base = T.conv1d_depthwise_causal(Tensor(x), kernel, bias).data
        bumped = x.copy()
        bumped[0, 5, :] += 10.0
        out = T.conv1d_depthwise_causal(Tensor(bumped), kernel, bias).data
        assert np.array_equal(out[:, :5], base[:, :5])

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            T.conv1d_depthwise_causal(Tensor(np.ones((1, 4, 3))), Tensor(np.ones((2, 2))),
                                      Tensor(np.ones(2)))

    def test_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(200 + seed)
            x = param64(rng, 2, 6, 3)
            kernel = param64(rng, 3, 4)
            bias = param64(rng, 3)
            err = check_gradients(
                lambda: weighted_sum(T.conv1d_depthwise_causal(x, kernel, bias), seed),
                {"x": x, "kernel": kernel, "bias": bias})
            assert err < 1e-5


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 256)))
        loss = T.cross_entropy(logits, np.array([0, 100, 255]))
        assert float(loss.data) == pytest.approx(math.log(256.0), abs=1e-12)

    def test_confident_correct(self):
        loss = T.cross_entropy(Tensor([[10.0, 0.0]]), np.array([0]))
        assert float(loss.data) == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
        assert float(loss.data) == pytest.approx(4.54e-5, rel=1e-2)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))

    def test_gradient(self):
        for seed in range(20):
            rng = np.random.default_rng(300 + seed)
            logits = param64(rng, 5, 7)
            targets = rng.integers(0, 7, size=5)
            err = check_gradients(lambda: T.cross_entropy(logits, targets), {"logits": logits})
            assert err < 1e-6

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]), requires_grad=True)
        targets = np.array([1, 2])
        T.cross_entropy(logits, targets).backward()
        p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(2), targets] -= 1.0
        assert np.allclose(logits.grad, p / 2.0, atol=1e-15)


class TestBackward:
    def test_double_backward_raises(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        loss.backward()
        with pytest.raises(RuntimeError, match="released"):
            loss.backward()

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.mul(x, x).backward()

    def test_grad_accumulates_across_uses(self):
        x = Tensor([3.0], requires_grad=True)
        loss = T.sum_all(T.add(x, x))
        loss.backward()
        assert x.grad[0] == 2.0

    def test_replay_determinism(self):
        rng = np.random.default_rng(11)
        data_a = rng.normal(size=(4, 4))
        data_b = rng.normal(size=(4, 4))

        def run():
            a = Tensor(data_a.copy(), requires_grad=True)
            b = Tensor(data_b.copy(), requires_grad=True)
            out = T.softmax(T.matmul(a, T.silu(b)))
            T.sum_all(T.mul(out, out)).backward()
            return a.grad.copy(), b.grad.copy()

        ga1, gb1 = run()
        ga2, gb2 = run()
        assert np.array_equal(ga1, ga2)
        assert np.array_equal(gb1, gb2)

    def test_populates_interior_grads(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        mid = T.silu(x)
        T.sum_all(mid).backward()
        assert mid.grad is not None and x.grad is not None

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.exp(x)
        assert not out.requires_grad


class TestPlumbingOps:
    def test_reshape_transpose_roundtrip_gradient(self):
        rng = np.random.default_rng(13)
        x = param64(rng, 2, 3, 4)
        err = check_gradients(
            lambda: weighted_sum(T.transpose(T.reshape(x, (2, 12, 1)), (1, 0, 2))),
            {"x": x})
        assert err < 1e-6

    def test_slice_concat_inverse(self):
        rng = np.random.default_rng(14)
        x = param64(rng, 3, 6)
        out = T.concat_last([T.slice_last(x, 0, 2), T.slice_last(x, 2, 6)])
        assert np.array_equal(out.data, x.data)
        err = check_gradients(
            lambda: weighted_sum(T.concat_last([T.slice_last(x, 0, 2), T.slice_last(x, 2, 6)])),
            {"x": x})
        assert err < 1e-6

    def test_embedding_gradient_scatters(self):
        w = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2, 2]])
        out = T.embedding(w, ids)
        assert out.shape == (1, 3, 3)
        T.sum_all(out).backward()
        assert np.array_equal(w.grad[:, 0], [1.0, 0.0, 2.0, 0.0])

    def test_embedding_bad_id(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.ones((4, 3))), np.array([4]))

    def test_gather_scatter_take_gradients(self):
        rng = np.random.default_rng(15)
        x = param64(rng, 6, 3)
        p = param64(rng, 6, 4)
        idx = np.array([1, 3, 4])
        cols = np.array([0, 2, 2])

        def loss():
            picked = T.gather_rows(x, idx)
            scaled = T.mul(picked, T.reshape(T.take_pairs(p, idx, cols), (3, 1)))
            return weighted_sum(T.scatter_rows(scaled, idx, 6))

        err = check_gradients(loss, {"x": x, "p": p})
        assert err < 1e-6

    def test_mean_axis_and_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        m = T.mean_axis(x, axis=0)
        assert np.allclose(m.data, [1.5, 2.5, 3.5])
        T.sum_all(m).backward()
        assert np.allclose(x.grad, 0.5)


class TestGradientPropertySuite:
    """Spec invariant: analytic vs central differences on random float64
    inputs in [-2, 2], 20 seeds, elementwise relative error < 1e-5."""

    def test_fused_op_chain(self):
        for seed in range(20):
            rng = np.random.default_rng(1000 + seed)
            x = param64(rng, 2, 3)
            w = param64(rng, 3, 4)
            gain = param64(rng, 4, lo=0.5, hi=1.5)

            def loss():
                h = T.rmsnorm(T.matmul(x, w), gain)
                return T.sum_all(T.mul(T.softmax(h, axis=-1), T.softplus(h)))

            err = check_gradients(loss, {"x": x, "w": w, "gain": gain})
            assert err < 1e-5, f"seed {seed}: {err}"
