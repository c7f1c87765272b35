import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightnet import reference as ref
from weightnet import tensor as T
from weightnet.numerics import FD_EPS, FD_RTOL, float64
from weightnet.selftest import gradcheck
from weightnet.tensor import DimensionError, Parameter, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self, f64, rng):
        b = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(T.matmul(t64(np.eye(3)), t64(b)).data, b)

    def test_hand_values(self, f64):
        out = T.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_matches_triple_loop(self, f64, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(T.matmul(t64(a), t64(b)).data, ref.naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch_names_both_shapes(self, f64):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


class TestConv2d:
    def test_identity_1x1(self, f64, rng):
        x = rng.standard_normal((2, 4, 5, 5))
        w = np.eye(4).reshape(4, 4, 1, 1)
        np.testing.assert_array_equal(T.conv2d(t64(x), t64(w)).data, x)

    def test_zero_weight(self, f64, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        y = T.conv2d(t64(x), t64(np.zeros((5, 3, 3, 3))), pad=1)
        assert not y.data.any()

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_naive_loop(self, f64, rng, stride, pad):
        x, w = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((6, 2, 3, 3))
        y = T.conv2d(t64(x), t64(w), groups=2, stride=stride, pad=pad).data
        np.testing.assert_allclose(y, ref.naive_conv2d(x, w, 2, stride, pad), atol=1e-12)

    def test_groups_equal_concat_of_slices(self, f64, rng):
        x, w = rng.standard_normal((2, 6, 5, 5)), rng.standard_normal((9, 2, 3, 3))
        y = T.conv2d(t64(x), t64(w), groups=3, pad=1).data
        parts = [T.conv2d(t64(x[:, 2 * g:2 * g + 2]), t64(w[3 * g:3 * g + 3]), pad=1).data for g in range(3)]
        np.testing.assert_allclose(y, np.concatenate(parts, axis=1), atol=1e-12)

    def test_indivisible_groups_rejected(self, f64):
        with pytest.raises(DimensionError):
            T.conv2d(t64(np.ones((1, 3, 4, 4))), t64(np.ones((4, 1, 3, 3))), groups=2)

    def test_kernel_larger_than_input_rejected(self, f64):
        with pytest.raises(DimensionError):
            T.conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 3, 3))))


class TestPoolAndActivations:
    def test_gap_constant(self, f64):
        x = np.full((2, 3, 4, 5), 2.5)
        np.testing.assert_array_equal(T.global_avg_pool(t64(x)).data, np.full((2, 3), 2.5))

    def test_gap_1x1_squeezes(self, f64, rng):
        x = rng.standard_normal((2, 3, 1, 1))
        np.testing.assert_array_equal(T.global_avg_pool(t64(x)).data, x[:, :, 0, 0])

    def test_gap_matches_explicit_mean(self, f64, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        expect = np.array([[x[b, c].sum() / 20 for c in range(3)] for b in range(2)])
        np.testing.assert_allclose(T.global_avg_pool(t64(x)).data, expect, atol=1e-14)

    def test_sigmoid_zero(self, f64):
        assert T.sigmoid(t64([0.0])).data[0] == 0.5

    def test_relu(self, f64):
        np.testing.assert_array_equal(T.relu(t64([-3.0, 3.0])).data, [0.0, 3.0])

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_sigmoid_saturates_without_overflow(self, dtype):
        import mpmath
        with np.errstate(all="raise"):
            y = T.sigmoid(Tensor(np.array([-40.0, 40.0], dtype=dtype))).data
        assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))
        expect = [float(1 / (1 + mpmath.exp(40))), float(1 / (1 + mpmath.exp(-40)))]
        np.testing.assert_allclose(y, expect, rtol=1e-6)


class TestAutodiff:
    def test_linear_grad_is_input(self, f64, rng):
        x = rng.standard_normal(5)
        w = Parameter(rng.standard_normal(5))
        (w * t64(x)).sum().backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_disconnected_parameter_gets_zero(self, f64):
        a, b = Parameter(np.ones(3)), Parameter(np.ones(2))
        ga, gb = T.backward((a * 2.0).sum(), [a, b])
        np.testing.assert_array_equal(ga, np.full(3, 2.0))
        np.testing.assert_array_equal(gb, np.zeros(2))

    def test_shared_node_accumulates(self, f64):
        a = Parameter(np.array([3.0]))
        y = a * a + a
        y.sum().backward()
        assert a.grad[0] == 7.0

    def test_nonscalar_loss_rejected(self, f64):
        with pytest.raises(DimensionError):
            Parameter(np.ones(3)).backward()

    def test_no_grad_records_nothing(self, f64):
        a = Parameter(np.ones(2))
        with T.no_grad():
            y = a * 3.0
        assert not y.requires_grad and y.parents == ()

    def test_composite_graph_matches_finite_differences(self, f64, rng):
        x = t64(rng.standard_normal((2, 3, 4, 4)), grad=True)
        w = t64(rng.standard_normal((4, 3, 3, 3)), grad=True)
        fc = t64(rng.standard_normal((4, 3)), grad=True)
        labels = np.array([1, 2])

        def loss():
            y = T.relu(T.conv2d(x, w, pad=1) + 0.3)
            return T.cross_entropy(T.sigmoid(T.global_avg_pool(y)) @ fc, labels)

        assert gradcheck(loss, [x, w, fc], FD_EPS) < FD_RTOL

    def test_concat_transpose_index_grads(self, f64, rng):
        a = t64(rng.standard_normal((2, 3)), grad=True)
        b = t64(rng.standard_normal((2, 2)), grad=True)
        r = rng.standard_normal((3, 5))

        def loss():
            c = T.transpose(T.concat([a, b], axis=1))
            return (c[1:4] * t64(r[:3, :2])).sum() + (c / 2.0 - 1.0).mean()

        assert gradcheck(loss, [a, b]) < FD_RTOL


@settings(max_examples=40, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 2**31 - 1))
def test_reshape_roundtrip_is_identity(shape, seed):
    data = np.random.default_rng(seed).standard_normal(shape)
    with float64():
        x = t64(data)
        back = T.reshape(T.reshape(x, (-1,)), tuple(shape))
    np.testing.assert_array_equal(back.data, data)


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))
