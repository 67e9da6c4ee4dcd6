"""Reverse-mode autodiff: forward oracles, finite-difference gradients and error paths."""

import numpy as np
import pytest
from scipy import signal, special

from helpers import grad_check, numeric_grad, relative_error
from metricemg import tensor as T
from metricemg.tensor import BatchNormState, ShapeError, Tensor, grad_of

TOL = 1e-4


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    # random projection so every output element influences the scalar
    return (out * weights).sum()


class TestForward:
    def test_conv_same_matches_scipy(self):
        rng = np.random.default_rng(0)
        for kh, kw in [(3, 3), (5, 5), (13, 13), (2, 4), (1, 1)]:
            x = rng.normal(size=(2, 3, 4, 16))
            w = rng.normal(size=(4, 3, kh, kw))
            b = rng.normal(size=4)
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding="same").data
            assert out.shape == (2, 4, 4, 16)
            pt, pl = (kh - 1) // 2, (kw - 1) // 2
            for n in range(2):
                for o in range(4):
                    full = sum(signal.correlate2d(x[n, c], w[o, c], mode="full") for c in range(3))
                    expect = full[kh - 1 - pt : kh - 1 - pt + 4, kw - 1 - pl : kw - 1 - pl + 16] + b[o]
                    np.testing.assert_allclose(out[n, o], expect, atol=1e-10)

    def test_conv_valid_matches_scipy(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 4, 16))
        w = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), padding="none").data
        assert out.shape == (1, 3, 2, 14)
        for o in range(3):
            expect = sum(signal.correlate2d(x[0, c], w[o, c], mode="valid") for c in range(2))
            np.testing.assert_allclose(out[0, o], expect, atol=1e-10)

    def test_conv_accepts_unbatched_input(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 4, 5))
        w, b = Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(np.zeros(2))
        single = T.conv2d(Tensor(x), w, b).data
        batched = T.conv2d(Tensor(x[None]), w, b).data[0]
        np.testing.assert_array_equal(single, batched)

    def test_log_softmax_is_stable(self):
        out = T.log_softmax(Tensor(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))).data
        np.testing.assert_allclose(out, [[0.0, -1000.0], [np.log(0.5), np.log(0.5)]])

    def test_special_functions(self):
        x = np.array([0.5, 1.0, 3.7])
        np.testing.assert_allclose(T.lgamma(Tensor(x)).data, special.gammaln(x))
        np.testing.assert_allclose(T.digamma(Tensor(x)).data, special.digamma(x))

    def test_pairwise_sq_dist(self):
        e = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]])
        d = T.pairwise_sq_dist(Tensor(e)).data
        np.testing.assert_allclose(d, [[0, 25, 2], [25, 0, 13], [2, 13, 0]])

    def test_dropout_scales_survivors(self):
        x = Tensor(np.ones((200, 50)))
        out = T.dropout(x, 0.5, train=True, rng=np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05
        assert T.dropout(x, 0.5, train=False, rng=None) is x

    def test_batch_norm_running_stats(self):
        rng = np.random.default_rng(3)
        state = BatchNormState(2)
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        x = rng.normal(5.0, 2.0, (8, 2, 3, 3))
        out = T.batch_norm(Tensor(x), gamma, beta, state, train=True).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(state.running_mean, x.mean(axis=(0, 2, 3)))
        x2 = rng.normal(size=(8, 2, 3, 3))
        T.batch_norm(Tensor(x2), gamma, beta, state, train=True)
        np.testing.assert_allclose(state.running_mean, 0.9 * x.mean(axis=(0, 2, 3)) + 0.1 * x2.mean(axis=(0, 2, 3)))
        ev = T.batch_norm(Tensor(x2), gamma, beta, state, train=False).data
        expect = (x2 - state.running_mean[None, :, None, None]) / np.sqrt(state.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(ev, expect)


class TestGradients:
    """Central finite differences on 20 randomized instances per operation."""

    N = 20

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "pow", "exp", "log", "matmul", "getitem", "concat", "mean_axis"])
    def test_elementwise_and_reductions(self, op):
        rng = np.random.default_rng(10)
        for _ in range(self.N):
            a = param(rng, 3, 4)
            b = param(rng, 1, 4)
            pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
            wts = rng.normal(size=(3, 4))
            m = param(rng, 4, 2)
            fns = {
                "add": lambda: weighted_sum(a + b, wts),
                "sub": lambda: weighted_sum(a - b, wts),
                "mul": lambda: weighted_sum(a * b, wts),
                "div": lambda: weighted_sum(a / pos, wts),
                "pow": lambda: weighted_sum(pos**1.7, wts),
                "exp": lambda: weighted_sum(T.exp(a), wts),
                "log": lambda: weighted_sum(T.log(pos), wts),
                "matmul": lambda: weighted_sum(a @ m, wts[:, :2]),
                "getitem": lambda: (a[np.array([0, 2, 2]), np.array([1, 3, 3])] * np.array([1.0, 2.0, 3.0])).sum(),
                "concat": lambda: weighted_sum(T.concat([a, b], axis=0), np.vstack([wts, wts[:1]])),
                "mean_axis": lambda: (T.mean(a * a, axis=1) * wts[:, 0]).sum(),
            }
            assert grad_check(fns[op], [a, b, pos, m]) < TOL

    @pytest.mark.parametrize("op", ["relu", "leaky_relu", "lgamma", "digamma", "log_softmax", "reshape"])
    def test_unary(self, op):
        rng = np.random.default_rng(11)
        for _ in range(self.N):
            x = param(rng, 4, 5)
            pos = Tensor(rng.uniform(0.3, 4.0, (4, 5)), requires_grad=True)
            wts = rng.normal(size=(4, 5))
            fns = {
                "relu": lambda: weighted_sum(T.relu(x), wts),
                "leaky_relu": lambda: weighted_sum(T.leaky_relu(x, 0.01), wts),
                "lgamma": lambda: weighted_sum(T.lgamma(pos), wts),
                "digamma": lambda: weighted_sum(T.digamma(pos), wts),
                "log_softmax": lambda: weighted_sum(T.log_softmax(x), wts),
                "reshape": lambda: weighted_sum(T.reshape(x, (5, 4)), wts.reshape(5, 4)),
            }
            assert grad_check(fns[op], [x, pos]) < TOL

    @pytest.mark.parametrize("padding", ["same", "none"])
    def test_conv2d(self, padding):
        rng = np.random.default_rng(12)
        for i in range(self.N):
            k = [1, 3, 5, 2, 4][i % 5] if padding == "same" else [1, 2, 3][i % 3]
            c_in, c_out = rng.integers(1, 3), rng.integers(1, 3)
            x = param(rng, 2, c_in, 4, 6)
            w = param(rng, c_out, c_in, k, k)
            b = param(rng, c_out)
            shape = T.conv2d(x, w, b, padding).shape
            wts = rng.normal(size=shape)
            assert grad_check(lambda: weighted_sum(T.conv2d(x, w, b, padding), wts), [x, w, b]) < TOL

    def test_conv2d_large_kernel(self):
        # kernels wider than the input exercise the partially dead offsets
        rng = np.random.default_rng(13)
        for _ in range(self.N):
            x = param(rng, 1, 1, 4, 5)
            w = param(rng, 1, 1, 13, 13)
            b = param(rng, 1)
            wts = rng.normal(size=(1, 1, 4, 5))
            assert grad_check(lambda: weighted_sum(T.conv2d(x, w, b), wts), [x, w, b]) < TOL

    def test_dense(self):
        rng = np.random.default_rng(14)
        for _ in range(self.N):
            x, w, b = param(rng, 5, 7), param(rng, 3, 7), param(rng, 3)
            wts = rng.normal(size=(5, 3))
            assert grad_check(lambda: weighted_sum(T.dense(x, w, b), wts), [x, w, b]) < TOL

    @pytest.mark.parametrize("ndim", [2, 4])
    def test_batch_norm_train(self, ndim):
        rng = np.random.default_rng(15)
        for _ in range(self.N):
            shape = (6, 3) if ndim == 2 else (4, 3, 2, 3)
            x = param(rng, *shape, scale=2.0)
            gamma, beta = param(rng, 3), param(rng, 3)
            state = BatchNormState(3)
            wts = rng.normal(size=shape)
            fn = lambda: weighted_sum(T.batch_norm(x, gamma, beta, state, train=True), wts)
            assert grad_check(fn, [x, gamma, beta]) < TOL

    def test_batch_norm_eval(self):
        rng = np.random.default_rng(16)
        for _ in range(self.N):
            x = param(rng, 4, 3, 2, 2)
            gamma, beta = param(rng, 3), param(rng, 3)
            state = BatchNormState(3)
            T.batch_norm(Tensor(rng.normal(size=(4, 3, 2, 2))), gamma, beta, state, train=True)
            wts = rng.normal(size=x.shape)
            fn = lambda: weighted_sum(T.batch_norm(x, gamma, beta, state, train=False), wts)
            assert grad_check(fn, [x, gamma, beta]) < TOL

    def test_dropout_fixed_mask(self):
        rng = np.random.default_rng(17)
        for i in range(self.N):
            x = param(rng, 4, 6)
            wts = rng.normal(size=(4, 6))
            fn = lambda: weighted_sum(T.dropout(x, 0.5, True, np.random.default_rng(i)), wts)
            assert grad_check(fn, [x]) < TOL

    def test_pairwise_sq_dist(self):
        rng = np.random.default_rng(18)
        for _ in range(self.N):
            e = param(rng, 6, 4)
            wts = rng.normal(size=(6, 6))
            assert grad_check(lambda: weighted_sum(T.pairwise_sq_dist(e), wts), [e]) < TOL

    def test_reused_node_accumulates(self):
        rng = np.random.default_rng(19)
        x = param(rng, 3)
        y = x * x
        fn = lambda: ((x * x) * (x * x) + x * x).sum()
        assert grad_check(fn, [x]) < TOL
        np.testing.assert_allclose(grad_of((y * y).sum(), [x])[0], 4 * x.data**3)


class TestErrors:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            grad_of(x * 2.0, [x])

    def test_unreachable_param_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        z = Tensor(np.ones((2, 2)), requires_grad=True)
        gx, gz = grad_of((x * 2.0).sum(), [x, z])
        np.testing.assert_array_equal(gx, 2.0)
        np.testing.assert_array_equal(gz, np.zeros((2, 2)))

    def test_conv_kernel_too_large_without_padding(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), "none")

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_dense_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))

    def test_batch_norm_eval_before_train(self):
        with pytest.raises(RuntimeError):
            T.batch_norm(Tensor(np.zeros((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState(1), train=False)

    def test_batch_norm_single_value(self):
        with pytest.raises(ShapeError):
            T.batch_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState(2), train=True)

    def test_dropout_rate_bounds(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor(np.zeros(3)), 1.0, True, np.random.default_rng(0))

    def test_numeric_grad_agrees_on_quadratic(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (g,) = numeric_grad(lambda: (x * x).sum(), [x])
        assert relative_error(g, 2 * x.data) < 1e-8
