import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightnet import reference as ref
from weightnet.exceptions import ConfigError
from weightnet.layers import (BatchNorm2d, Conv2d, FullyConnected, GroupedFullyConnected, grouped_fc_forward,
                              init_params)
from weightnet.numerics import FD_RTOL, float64
from weightnet.selftest import gradcheck
from weightnet.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestGroupedFC:
    def test_one_group_is_dense_fc(self, f64, rng):
        g = GroupedFullyConnected(6, 4, 1, rng=rng)
        fc = FullyConnected(6, 4, bias=False)
        fc.weight.data[...] = g.weight.data[0]
        x = t64(rng.standard_normal((3, 6)))
        np.testing.assert_array_equal(g(x).data, fc(x).data)

    def test_diagonal_case_scales_elementwise(self, f64, rng):
        g = GroupedFullyConnected(5, 5, 5, rng=rng)
        x = rng.standard_normal((2, 5))
        np.testing.assert_allclose(g(t64(x)).data, x * g.weight.data[:, 0, 0], atol=1e-15)

    def test_block_diagonal_oracle(self, f64, rng):
        g = GroupedFullyConnected(8, 16, 4, rng=rng)
        x = rng.standard_normal((3, 8))
        dense = ref.block_diagonal(g.weight.data)
        np.testing.assert_allclose(grouped_fc_forward(g, t64(x)).data, x @ dense.T, atol=1e-12)

    def test_indivisible_groups(self):
        with pytest.raises(ConfigError):
            GroupedFullyConnected(6, 4, 4)

    def test_wrong_input_width(self, f64):
        from weightnet.tensor import DimensionError
        with pytest.raises(DimensionError, match="got input"):
            GroupedFullyConnected(8, 8, 2)(t64(np.ones((1, 6))))


@settings(max_examples=30, deadline=None)
@given(g=st.sampled_from([1, 2, 3, 4, 6]), ki=st.integers(1, 3), ko=st.integers(1, 3),
       seed=st.integers(0, 2**31 - 1))
def test_grouped_fc_dense_equivalence_and_counts(g, ki, ko, seed):
    i, o = g * ki, g * ko
    rng = np.random.default_rng(seed)
    with float64():
        layer = GroupedFullyConnected(i, o, g, rng=rng)
        x = rng.standard_normal((2, i))
        dense = ref.block_diagonal(layer.weight.data)
        np.testing.assert_allclose(layer(t64(x)).data, x @ dense.T, atol=1e-12)
    stored = sum(p.data.size for p in layer.parameters())
    assert stored == layer.num_parameters() == o * i // g
    # exactly o*i/g positions of the dense matrix can be nonzero
    mask = ref.block_diagonal(np.ones_like(layer.weight.data))
    assert int(mask.sum()) == o * i // g


class TestInit:
    def test_bound_from_fan_in(self):
        fc = FullyConnected(100, 50, rng=np.random.default_rng(0))
        assert np.abs(fc.weight.data).max() <= 0.1

    def test_same_seed_same_params(self):
        a, b = Conv2d(3, 4), Conv2d(3, 4)
        init_params(a, 7)
        init_params(b, 7)
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_grouped_bound_uses_block_fan_in(self):
        g = GroupedFullyConnected(64, 64, 4, rng=np.random.default_rng(0))
        bound = 1 / math.sqrt(64 / 4)
        w = np.abs(g.weight.data)
        assert w.max() <= bound
        # a dense fan-in of 64 would cap at 0.125; the block bound is visibly used
        assert w.max() > 1 / math.sqrt(64)


class TestModuleBookkeeping:
    def test_state_dict_roundtrip(self, rng):
        a = BatchNorm2d(3)
        a(Tensor(rng.standard_normal((4, 3, 2, 2)).astype(np.float32)))
        b = BatchNorm2d(3)
        b.load_state_dict(a.state_dict())
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            np.testing.assert_array_equal(va, vb)

    def test_load_state_dict_rejects_mismatch(self):
        with pytest.raises(ConfigError):
            Conv2d(3, 4).load_state_dict({"weight": np.zeros((1, 1, 1, 1), np.float32)})


class TestBatchNorm:
    def test_train_mode_normalizes(self, f64, rng):
        bn = BatchNorm2d(3)
        y = bn(t64(rng.standard_normal((8, 3, 4, 4)) * 3 + 2)).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_eval_uses_running_stats(self, f64, rng):
        bn = BatchNorm2d(2)
        bn.eval()
        x = rng.standard_normal((2, 2, 3, 3))
        np.testing.assert_allclose(bn(t64(x)).data, x / np.sqrt(1 + bn.eps), atol=1e-12)


@pytest.mark.parametrize("instance", range(10))
def test_layer_gradients(f64, instance):
    rng = np.random.default_rng(instance)
    fc = FullyConnected(4, 3, rng=rng)
    gfc = GroupedFullyConnected(6, 4, 2, bias=True, rng=rng)
    conv = Conv2d(2, 4, 3, stride=1 + instance % 2, groups=2, bias=True, rng=rng)
    bn = BatchNorm2d(4)
    x = t64(rng.standard_normal((2, 4)), grad=True)
    z = t64(rng.standard_normal((2, 6)), grad=True)
    img = t64(rng.standard_normal((2, 2, 5, 5)), grad=True)
    r1, r2 = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    r3 = rng.standard_normal(conv(img).shape)
    assert gradcheck(lambda: (fc(x) * t64(r1)).sum(), [x] + fc.parameters()) < FD_RTOL
    assert gradcheck(lambda: (gfc(z) * t64(r2)).sum(), [z] + gfc.parameters()) < FD_RTOL
    assert gradcheck(lambda: (bn(conv(img)) * t64(r3)).sum(), [img] + conv.parameters() + bn.parameters()) < FD_RTOL
