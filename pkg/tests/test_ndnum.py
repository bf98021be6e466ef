import numpy as np
import pytest

from volmae import ndnum
from volmae.ndnum import (
    AdamState,
    Tensor,
    adam_step,
    add,
    backward,
    gelu,
    layer_norm,
    lr_schedule,
    matmul,
    mul,
    neg,
    no_grad,
    place_tokens,
    power,
    reshape,
    softmax,
    softmax_attention,
    take_tokens,
    tmean,
    transpose,
    tsum,
)
from volmae.errors import ConfigError, ContractError, DimensionError

from helpers import check_gradients, leaf, naive_matmul

RNG = np.random.default_rng(4321)


def scalarize(t: Tensor) -> Tensor:
    """Collapse to a scalar with non-uniform weights so gradients differ."""
    w = Tensor(np.linspace(0.5, 1.5, t.data.size).reshape(t.data.shape))
    return tsum(mul(t, w))


class TestElementwiseGradients:
    def test_add_broadcast(self):
        a = leaf(RNG, 3, 4)
        b = leaf(RNG, 4)
        check_gradients(lambda a, b: scalarize(add(a, b)), [a, b])

    def test_add_scalar_broadcast(self):
        a = leaf(RNG, 2, 3)
        b = leaf(RNG, 1, 1)
        check_gradients(lambda a, b: scalarize(add(a, b)), [a, b])

    def test_mul_broadcast(self):
        a = leaf(RNG, 2, 5)
        b = leaf(RNG, 2, 1)
        check_gradients(lambda a, b: scalarize(mul(a, b)), [a, b])

    def test_neg(self):
        a = leaf(RNG, 4, 2)
        check_gradients(lambda a: scalarize(neg(a)), [a])

    @pytest.mark.parametrize("p", [2.0, 3.0, 0.5])
    def test_power(self, p):
        a = Tensor(RNG.uniform(0.5, 2.0, (3, 3)), requires_grad=True)
        check_gradients(lambda a: scalarize(power(a, p)), [a])

    def test_gelu(self):
        a = leaf(RNG, 5, 3)
        check_gradients(lambda a: scalarize(gelu(a)), [a])

    def test_gelu_forward_limits(self):
        x = Tensor(np.array([-20.0, 0.0, 20.0]))
        out = gelu(x).data
        np.testing.assert_allclose(out, [0.0, 0.0, 20.0], atol=1e-6)


class TestShapeOpGradients:
    def test_reshape(self):
        a = leaf(RNG, 2, 6)
        check_gradients(lambda a: scalarize(reshape(a, (3, 4))), [a])

    def test_transpose(self):
        a = leaf(RNG, 2, 3, 4)
        check_gradients(lambda a: scalarize(transpose(a, (2, 0, 1))), [a])

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True)])
    def test_tsum(self, axis, keepdims):
        a = leaf(RNG, 3, 4)
        check_gradients(lambda a: scalarize(tsum(a, axis=axis, keepdims=keepdims)), [a])

    @pytest.mark.parametrize("axis", [None, 0, -1])
    def test_tmean(self, axis):
        a = leaf(RNG, 4, 3)
        check_gradients(lambda a: scalarize(tmean(a, axis=axis)), [a])


class TestMatmul:
    def test_forward_matches_naive(self):
        for _ in range(100):
            m, k, n = RNG.integers(1, 6, size=3)
            a = RNG.standard_normal((m, k))
            b = RNG.standard_normal((k, n))
            got = matmul(Tensor(a), Tensor(b)).data
            np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_grad_2d(self):
        a = leaf(RNG, 3, 4)
        b = leaf(RNG, 4, 2)
        check_gradients(lambda a, b: scalarize(matmul(a, b)), [a, b])

    def test_grad_batched_times_weight(self):
        a = leaf(RNG, 2, 3, 4)
        b = leaf(RNG, 4, 5)
        check_gradients(lambda a, b: scalarize(matmul(a, b)), [a, b])

    def test_grad_batched_pair(self):
        a = leaf(RNG, 2, 3, 4)
        b = leaf(RNG, 2, 4, 3)
        check_gradients(lambda a, b: scalarize(matmul(a, b)), [a, b])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestNormalizationOps:
    def test_softmax_rows_sum_to_one(self):
        x = Tensor(RNG.standard_normal((6, 9)))
        s = softmax(x).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(6), atol=1e-12)
        assert np.all(s > 0)

    def test_softmax_shift_invariance(self):
        x = RNG.standard_normal((3, 5))
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + 100.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_grad(self):
        x = leaf(RNG, 3, 4)
        check_gradients(lambda x: scalarize(softmax(x)), [x])

    def test_layer_norm_moments(self):
        x = Tensor(RNG.standard_normal((5, 16)) * 3 + 2)
        g = Tensor(np.ones(16))
        b = Tensor(np.zeros(16))
        out = layer_norm(x, g, b).data
        np.testing.assert_allclose(out.mean(axis=-1), np.zeros(5), atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), np.ones(5), atol=1e-3)

    def test_layer_norm_grads(self):
        x = leaf(RNG, 4, 8)
        g = leaf(RNG, 8)
        b = leaf(RNG, 8)
        check_gradients(lambda x, g, b: scalarize(layer_norm(x, g, b)), [x, g, b],
                        h=1e-5, atol=1e-6, rtol=1e-4)

    def test_attention_grads(self):
        q = leaf(RNG, 2, 5, 4)
        k = leaf(RNG, 2, 5, 4)
        v = leaf(RNG, 2, 5, 4)
        check_gradients(
            lambda q, k, v: scalarize(softmax_attention(q, k, v, 0.5)), [q, k, v],
            h=1e-5, atol=1e-6, rtol=1e-4,
        )


class TestTokenOps:
    def test_take_tokens_unbatched(self):
        x = leaf(RNG, 7, 3)
        idx = np.array([4, 0, 6])
        np.testing.assert_array_equal(take_tokens(x, idx).data, x.data[idx])
        check_gradients(lambda x: scalarize(take_tokens(x, idx)), [x])

    def test_take_tokens_batched(self):
        x = leaf(RNG, 2, 6, 3)
        idx = np.array([[0, 5, 2], [1, 1, 4]])
        out = take_tokens(x, idx).data
        assert out.shape == (2, 3, 3)
        check_gradients(lambda x: scalarize(take_tokens(x, idx)), [x])

    def test_take_tokens_repeated_index_accumulates(self):
        x = leaf(RNG, 4, 2)
        idx = np.array([1, 1, 3])
        check_gradients(lambda x: scalarize(take_tokens(x, idx)), [x])

    def test_place_tokens_roundtrip(self):
        x = leaf(RNG, 3, 5)
        fill = leaf(RNG, 5)
        kept = np.array([0, 3, 4])
        masked = np.array([1, 2])
        out = place_tokens(x, fill, kept, masked, 5)
        np.testing.assert_array_equal(out.data[kept], x.data)
        np.testing.assert_array_equal(out.data[masked], np.broadcast_to(fill.data, (2, 5)))
        check_gradients(lambda x, fill: scalarize(place_tokens(x, fill, kept, masked, 5)),
                        [x, fill])

    def test_place_tokens_batched_grads(self):
        x = leaf(RNG, 2, 2, 4)
        fill = leaf(RNG, 4)
        kept = np.array([[0, 2], [1, 3]])
        masked = np.array([[1, 3], [0, 2]])
        check_gradients(lambda x, fill: scalarize(place_tokens(x, fill, kept, masked, 4)),
                        [x, fill])

    def test_take_tokens_bad_shapes(self):
        with pytest.raises(DimensionError):
            take_tokens(Tensor(np.zeros((2, 2))), np.zeros((1, 2), dtype=int))


class TestBackward:
    def test_diamond_reuse_accumulates(self):
        # y = x*x + x — the node x feeds two paths
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = add(mul(x, x), x)
        backward(tsum(y))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_grad_accumulates_across_backwards(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        backward(tsum(mul(x, x)))
        backward(tsum(mul(x, x)))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert y._grad_fn is None and not y.requires_grad

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(mul(x, x))


class TestAdam:
    def _params(self):
        w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
        b = Tensor(np.array([0.5]), requires_grad=True)
        w.grad = np.array([[0.1, -0.3]])
        b.grad = np.array([0.2])
        return [("w", w), ("b", b)]

    def test_single_step_matches_hand_formula(self):
        params = self._params()
        state = AdamState()
        w0 = params[0][1].data.copy()
        b0 = params[1][1].data.copy()
        gw = params[0][1].grad.copy()
        gb = params[1][1].grad.copy()
        adam_step(params, state, lr=0.01)

        def expected(p0, g, decay):
            m = 0.1 * g
            v = 0.05 * g * g
            mhat = m / (1 - 0.9)
            vhat = v / (1 - 0.95)
            p = p0.copy()
            if decay:
                p = p - 0.01 * 0.05 * p
            return p - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)

        np.testing.assert_allclose(params[0][1].data, expected(w0, gw, True), atol=1e-15)
        np.testing.assert_allclose(params[1][1].data, expected(b0, gb, False), atol=1e-15)
        assert state.step == 1

    def test_decay_skips_one_dim_params(self):
        b = Tensor(np.array([4.0]), requires_grad=True)
        b.grad = np.array([0.0])
        adam_step([("b", b)], AdamState(), lr=0.5)
        # zero gradient + no decay → the bias must not move
        np.testing.assert_allclose(b.data, [4.0])

    def test_missing_grad_rejected(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            adam_step([("w", w)], AdamState(), lr=0.1)


class TestLrSchedule:
    def test_warmup_endpoints(self):
        assert lr_schedule(0, 1e-3, 7, 100) == 0.0
        assert lr_schedule(7, 1e-3, 7, 100) == pytest.approx(1e-3)

    def test_warmup_is_linear(self):
        for e in range(8):
            assert lr_schedule(e, 7.0, 7, 50) == pytest.approx(float(e))

    def test_cosine_decays_to_zero(self):
        lrs = [lr_schedule(e, 1e-3, 7, 100) for e in range(7, 100)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] < 1e-5

    def test_invalid_epochs(self):
        with pytest.raises(ConfigError):
            lr_schedule(0, 1e-3, 10, 10)
        with pytest.raises(ConfigError):
            lr_schedule(100, 1e-3, 7, 100)
        with pytest.raises(ConfigError):
            lr_schedule(-1, 1e-3, 7, 100)
