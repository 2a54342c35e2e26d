import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chbc import numerics as nx
from chbc.errors import ContractError, DimensionError, ParameterError
from chbc.numerics import Tensor

FD_TOL = 1e-4


def leaf(rng, *shape, positive=False):
    data = rng.uniform(0.1, 1.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def weighted_sum(t: Tensor, rng) -> Tensor:
    # random projection so every output entry matters to the scalar
    return nx.sum_(t * Tensor(rng.normal(size=t.shape)))


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(2, 3))
        assert np.array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_annihilator(self, rng):
        a = rng.normal(size=(3, 2))
        assert np.array_equal(nx.matmul(Tensor(a), Tensor(np.zeros((2, 4)))).data, np.zeros((3, 4)))

    def test_hand_value(self):
        out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert out.data.tolist() == [[17.0], [39.0]]

    def test_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        proj = rng.normal(size=(3, 2))
        assert nx.check_gradients(lambda: nx.sum_(nx.matmul(a, b) * proj), [a, b]) < FD_TOL


class TestConv2d:
    def test_unit_kernel_is_identity(self, rng):
        x = rng.normal(size=(2, 1, 4, 5))
        out = nx.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.allclose(out.data, x)

    def test_zero_kernel(self, rng):
        out = nx.conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), padding=1)
        assert out.shape == (1, 3, 4, 4)
        assert not out.data.any()

    def test_ones_example(self):
        out = nx.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
        assert out.data.tolist() == [[[[4.0, 4.0], [4.0, 4.0]]]]

    def test_matches_direct_loops(self, rng):
        # brute-force cross-correlation oracle
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        stride, pad = 2, 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        oh, ow = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
        ref = np.zeros((2, 4, oh, ow))
        for b in range(2):
            for o in range(4):
                for i in range(oh):
                    for j in range(ow):
                        ref[b, o, i, j] = (xp[b, :, i * stride:i * stride + 3, j * stride:j * stride + 3] * w[o]).sum()
        out = nx.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            nx.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_bad_stride(self):
        with pytest.raises(ParameterError):
            nx.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_gradient(self, rng, stride, padding):
        x, w, b = leaf(rng, 2, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
        out_shape = nx.conv2d(x, w, b, stride, padding).shape
        proj = rng.normal(size=out_shape)
        fn = lambda: nx.sum_(nx.conv2d(x, w, b, stride=stride, padding=padding) * proj)  # noqa: E731
        assert nx.check_gradients(fn, [x, w, b]) < FD_TOL


class TestSoftmax:
    def test_uniform_logits(self):
        out = nx.softmax_t(Tensor(np.full((2, 4), 3.0)), 7.0)
        assert np.allclose(out.data, 0.25)

    def test_closed_form(self):
        out = nx.softmax_t(Tensor([[0.0, math.log(3.0)]]), 1.0)
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_high_temperature(self):
        out = nx.softmax_t(Tensor([[5.0, -5.0]]), 1000.0)
        assert np.all(np.abs(out.data - 0.5) < 0.01)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_rejects_nonpositive_temperature(self, t):
        with pytest.raises(ParameterError):
            nx.softmax_t(Tensor([[1.0, 2.0]]), t)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(0.1, 10))
    def test_rows_are_distributions(self, logits, t):
        out = nx.softmax_t(Tensor(logits), t).data
        assert (out >= 0).all()
        assert np.all(np.abs(out.sum(axis=1) - 1) <= 1e-9)

    @pytest.mark.parametrize("t", [1.0, 2.0, 0.5])
    def test_gradient(self, rng, t):
        z = leaf(rng, 4, 6)
        assert nx.check_gradients(lambda: weighted_sum(nx.softmax_t(z, t), np.random.default_rng(0)), [z]) < FD_TOL


class TestElementwise:
    def test_relu_negative(self):
        assert nx.relu(Tensor(-1.0)).item() == 0.0

    def test_log_one(self):
        assert nx.log(Tensor(1.0)).item() == 0.0

    def test_broadcast_mul_mask(self):
        out = nx.broadcast_mul(Tensor(np.ones((2, 2, 2))), Tensor(np.full((2, 2), 0.5)))
        assert np.array_equal(out.data, np.full((2, 2, 2), 0.5))

    def test_broadcast_mul_inserts_channel_axis(self, rng):
        f = rng.normal(size=(2, 3, 4, 4))
        m = rng.uniform(size=(2, 4, 4))
        out = nx.broadcast_mul(Tensor(f), Tensor(m))
        assert np.array_equal(out.data, f * m[:, None])

    def test_incompatible_broadcast(self):
        with pytest.raises(DimensionError):
            nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_gradients_with_broadcast(self, rng, op):
        a = leaf(rng, 3, 4)
        b = leaf(rng, 4, positive=True)
        fn = getattr(nx, op)
        assert nx.check_gradients(lambda: weighted_sum(fn(a, b), np.random.default_rng(1)), [a, b]) < FD_TOL

    @pytest.mark.parametrize("op", ["log", "exp", "relu"])
    def test_unary_gradients(self, rng, op):
        x = leaf(rng, 3, 4, positive=(op == "log"))
        if op == "relu":
            x.data[np.abs(x.data) < 1e-3] += 0.1  # keep away from the kink
        fn = getattr(nx, op)
        assert nx.check_gradients(lambda: weighted_sum(fn(x), np.random.default_rng(2)), [x]) < FD_TOL

    def test_scale_gradient(self, rng):
        x = leaf(rng, 5)
        assert nx.check_gradients(lambda: weighted_sum(nx.scale(x, -2.5), np.random.default_rng(3)), [x]) < FD_TOL

    def test_broadcast_mul_gradient(self, rng):
        f, m = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 4, 4)
        assert nx.check_gradients(lambda: weighted_sum(nx.broadcast_mul(f, m), np.random.default_rng(4)), [f, m]) < FD_TOL

    def test_inputs_not_mutated(self, rng):
        a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
        before = a.data.copy(), b.data.copy()
        loss = nx.sum_(nx.relu(nx.matmul(a, b)) * nx.exp(a))
        loss.backward()
        assert np.array_equal(a.data, before[0]) and np.array_equal(b.data, before[1])


class TestPoolingAndConcat:
    def test_constant_map(self):
        out = nx.avg_pool_spatial(Tensor(np.full((2, 3, 4, 4), 1.5)))
        assert np.array_equal(out.data, np.full((2, 3), 1.5))

    def test_hand_value(self):
        out = nx.avg_pool_spatial(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)))
        assert out.data.item() == 2.5

    def test_pool_gradient_spreads_evenly(self):
        x = Tensor(np.zeros((1, 2, 2, 3)), requires_grad=True)
        nx.sum_(nx.avg_pool_spatial(x) * Tensor([[2.0, 6.0]])).backward()
        assert np.allclose(x.grad[0, 0], 2.0 / 6) and np.allclose(x.grad[0, 1], 1.0)

    def test_concat_single(self, rng):
        a = rng.normal(size=(2, 3))
        assert np.array_equal(nx.concat_channels([Tensor(a)]).data, a)

    def test_concat_segments(self):
        out = nx.concat_channels([Tensor(np.full((2, 2), 1.0)), Tensor(np.full((2, 3), 2.0))])
        assert out.data.tolist() == [[1, 1, 2, 2, 2]] * 2

    def test_concat_batch_mismatch(self):
        with pytest.raises(DimensionError):
            nx.concat_channels([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2)))])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
    def test_split_concat_roundtrip(self, widths, batch):
        gen = np.random.default_rng(sum(widths) * 7 + batch)
        xs = [gen.normal(size=(batch, w)) for w in widths]
        parts = nx.split(nx.concat_channels([Tensor(x) for x in xs]), widths)
        assert all(np.array_equal(p.data, x) for p, x in zip(parts, xs))

    def test_concat_gradient(self, rng):
        a, b = leaf(rng, 2, 2), leaf(rng, 2, 3)
        assert nx.check_gradients(lambda: weighted_sum(nx.concat_channels([a, b]), np.random.default_rng(5)), [a, b]) < FD_TOL


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng, 3, 2)
        nx.sum_(x).backward()
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_quadratic(self, rng):
        x = leaf(rng, 4)
        nx.scale(nx.sum_(x * x), 0.5).backward()
        assert np.allclose(x.grad, x.data)

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ContractError):
            (leaf(rng, 2) * 2.0).backward()

    def test_unreachable_grad_stays_zero(self, rng):
        used, unused = leaf(rng, 3), leaf(rng, 3)
        nx.sum_(used * used).backward()
        assert np.array_equal(unused.grad, np.zeros(3))

    def test_grad_present_iff_requires_grad(self):
        assert Tensor([1.0]).grad is None
        assert Tensor([1.0], requires_grad=True).grad.shape == (1,)

    def test_shared_subexpression_visited_once(self, rng):
        x = leaf(rng, 3)
        y = x * x
        nx.sum_(y + y).backward()  # d/dx 2x^2 = 4x
        assert np.allclose(x.grad, 4 * x.data)

    def test_minmax_normalize_gradient(self, rng):
        x = leaf(rng, 2, 4, 4)
        assert nx.check_gradients(lambda: weighted_sum(nx.minmax_normalize(x), np.random.default_rng(6)), [x]) < FD_TOL

    def test_cross_entropy_gradient(self, rng):
        z = leaf(rng, 5, 4)
        labels = np.array([0, 3, 1, 1, 2])
        assert nx.check_gradients(lambda: nx.cross_entropy(z, labels), [z]) < FD_TOL

    def test_deterministic_forward(self):
        outs = []
        for _ in range(2):
            gen = np.random.default_rng(9)
            x, w = Tensor(gen.normal(size=(2, 3, 5, 5))), Tensor(gen.normal(size=(2, 3, 3, 3)))
            outs.append(nx.softmax_t(nx.avg_pool_spatial(nx.conv2d(x, w, padding=1)), 2.0).data)
        assert np.array_equal(outs[0], outs[1])
