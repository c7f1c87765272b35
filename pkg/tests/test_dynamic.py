from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weightnet import dynamic as D
from weightnet import reference as ref
from weightnet import tensor as T
from weightnet.exceptions import ConfigError
from weightnet.numerics import FD_RTOL, float64
from weightnet.selftest import gradcheck
from weightnet.tensor import DimensionError, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def zero_biases(layer):
    for name, p in layer.named_parameters():
        if name.endswith("bias"):
            p.data[...] = 0


class TestConfigs:
    def test_lambda_and_groups(self):
        cfg = D.WeightNetConfig(16, 16, 3, 3, M=8, G=2)
        assert cfg.lam == 4 and cfg.alpha_dim == 128 and cfg.groups == 32

    def test_fractional_multipliers(self):
        cfg = D.WeightNetConfig(8, 8, 1, 1, M="1/2", G="1/4")
        assert cfg.alpha_dim == 4 and cfg.groups == 2 and cfg.lam == Fraction(2)

    @pytest.mark.parametrize("M,G", [(3, 2), ("1/3", 1), (0, 1)])
    def test_indivisible_rejected(self, M, G):
        with pytest.raises(ConfigError):
            D.WeightNetConfig(8, 8, 3, 3, M=M, G=G)

    def test_generated_kernel_validation(self):
        with pytest.raises(DimensionError):
            D.GeneratedKernel(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ValueError):
            D.GeneratedKernel(np.full((1, 1, 1, 1, 1), np.nan))


class TestGroupedFCRows:
    def test_condconv_row(self):
        r = D.grouped_fc_config_of("condconv", C=16, m=4)
        assert (r.input_size, r.groups, r.lam) == (4, 1, 4)

    def test_senet_row(self):
        r = D.grouped_fc_config_of("senet", C=16)
        assert (r.input_size, r.groups, r.lam) == (16, 16, 1)

    def test_weightnet_row(self):
        r = D.grouped_fc_config_of("weightnet", C=16, M=2, G=2)
        assert (r.input_size, r.groups, r.lam) == (32, 32, 1)
        assert r.output_size == 256


class TestWeightNet:
    def test_zero_input_alpha_is_half(self, f64):
        layer = D.WeightNetConv2d(D.WeightNetConfig(4, 4, 3, 3, M=2, G=2, r=2))
        zero_biases(layer)
        a = D.alpha_weightnet(layer, t64(np.zeros((2, 4, 5, 5))))
        np.testing.assert_array_equal(a.data, 0.5)

    def test_alpha_in_open_interval(self, f64, rng):
        layer = D.WeightNetConv2d(D.WeightNetConfig(4, 4, 3, 3, M=2, G=1, r=2), rng=rng)
        a = layer.alpha(t64(rng.standard_normal((3, 4, 5, 5)) * 10)).data
        assert np.all((a > 0) & (a < 1))

    def test_alpha_matches_manual_composition(self, f64, rng):
        layer = D.WeightNetConv2d(D.WeightNetConfig(8, 8, 3, 3, M=2, G=2, r=4), rng=rng)
        x = rng.standard_normal((2, 8, 4, 4))
        gap = x.mean(axis=(2, 3))
        h = gap @ layer.fc1.weight.data.T + layer.fc1.bias.data
        expect = ref.sigmoid(h @ layer.fc2.weight.data.T + layer.fc2.bias.data)
        np.testing.assert_allclose(layer.alpha(t64(x)).data, expect, atol=1e-14)

    def test_constructed_identity_recovers_static_kernel(self, f64, rng):
        C, k = 4, 3
        layer = D.WeightNetConv2d(D.WeightNetConfig(C, C, k, k, M=1, G=1), rng=rng)
        static = rng.standard_normal((C, C, k, k))
        per = static.size // C
        layer.gen.weight.data[...] = static.reshape(C, per, 1)
        kern = D.weightnet_generate(layer, t64(np.ones((3, C)))).data
        for b in range(3):
            np.testing.assert_array_equal(kern[b], static)
        # forward with injected alpha therefore matches the static conv
        x = rng.standard_normal((3, C, 5, 5))
        y = layer(t64(x), alpha=t64(np.ones((3, C)))).data
        np.testing.assert_allclose(y, T.conv2d(t64(x), t64(static), pad=1).data, atol=1e-12)

    @pytest.mark.parametrize("lam", [1, 2, 4, 8])
    @pytest.mark.parametrize("G", [1, 2])
    def test_generator_param_count(self, lam, G):
        cfg = D.WeightNetConfig(8, 8, 3, 3, M=lam * G, G=G)
        layer = D.WeightNetConv2d(cfg)
        assert layer.gen.weight.data.size == lam * 8 * 8 * 9
        assert D.kernel_parameter_count(layer) == lam * 8 * 8 * 9

    def test_generate_matches_dense_oracle(self, f64, rng):
        layer = D.WeightNetConv2d(D.WeightNetConfig(8, 8, 3, 3, M=2, G=2), rng=rng)
        alpha = rng.uniform(0, 1, (3, 16))
        dense = ref.block_diagonal(layer.gen.weight.data)
        expect = (alpha @ dense.T).reshape(3, 8, 8, 3, 3)
        np.testing.assert_allclose(layer.generate(t64(alpha)).data, expect, atol=1e-12)

    def test_wrong_alpha_width(self, f64):
        layer = D.WeightNetConv2d(D.WeightNetConfig(4, 4, 1, 1, M=2, G=1))
        with pytest.raises(DimensionError):
            layer.generate(t64(np.ones((1, 4))))


class TestDynamicConvApply:
    def test_single_sample_is_plain_conv(self, f64, rng):
        k = rng.standard_normal((1, 3, 2, 3, 3))
        x = rng.standard_normal((1, 2, 5, 5))
        y = D.dynamic_conv_apply(t64(k), t64(x), 1, 1).data
        np.testing.assert_array_equal(y, T.conv2d(t64(x), t64(k[0]), pad=1).data)

    def test_shared_kernel_is_static_conv(self, f64, rng):
        w = rng.standard_normal((3, 2, 3, 3))
        x = rng.standard_normal((4, 2, 6, 6))
        y = D.dynamic_conv_apply(t64(np.broadcast_to(w, (4,) + w.shape)), t64(x), 2, 1).data
        np.testing.assert_allclose(y, T.conv2d(t64(x), t64(w), stride=2, pad=1).data, atol=1e-12)

    def test_per_sample_loop_oracle(self, f64, rng):
        k = rng.standard_normal((3, 4, 2, 3, 3))
        x = rng.standard_normal((3, 2, 5, 5))
        np.testing.assert_allclose(D.dynamic_conv_apply(D.GeneratedKernel(k), t64(x), 1, 1).data,
                                   ref.per_sample_conv(k, x, 1, 1), atol=1e-12)

    def test_batch_mismatch(self, f64):
        with pytest.raises(DimensionError):
            D.dynamic_conv_apply(t64(np.ones((2, 1, 1, 1, 1))), t64(np.ones((3, 1, 2, 2))))


class TestCondConv:
    def test_zero_input_alpha_half(self, f64):
        layer = D.CondConv2d(D.CondConvConfig(4, 4, 3, 3, m=3))
        zero_biases(layer)
        np.testing.assert_array_equal(D.condconv_alpha(layer, t64(np.zeros((2, 4, 3, 3)))).data, 0.5)

    def test_single_expert_scalar_gate(self, f64, rng):
        layer = D.CondConv2d(D.CondConvConfig(4, 4, 3, 3, m=1), rng=rng)
        assert layer.alpha(t64(rng.standard_normal((5, 4, 3, 3)))).shape == (5, 1)

    def test_alpha_matches_manual(self, f64, rng):
        layer = D.CondConv2d(D.CondConvConfig(4, 4, 3, 3, m=3), rng=rng)
        x = rng.standard_normal((2, 4, 3, 3))
        expect = ref.sigmoid(x.mean(axis=(2, 3)) @ layer.route.weight.data.T + layer.route.bias.data)
        np.testing.assert_allclose(layer.alpha(t64(x)).data, expect, atol=1e-14)

    @pytest.mark.parametrize("fn", [D.condconv_mixture, D.condconv_fc_form])
    def test_one_hot_selects_expert(self, f64, rng, fn):
        experts = rng.standard_normal((4, 3, 3, 1, 1))
        for i in range(4):
            alpha = np.eye(4)[i][None]
            np.testing.assert_array_equal(fn(t64(experts), t64(alpha)).data[0], experts[i])

    def test_zero_alpha_zero_kernel(self, f64, rng):
        experts = rng.standard_normal((3, 2, 2, 3, 3))
        assert not D.condconv_mixture(t64(experts), t64(np.zeros((2, 3)))).data.any()

    def test_single_expert_unit_gate(self, f64, rng):
        experts = rng.standard_normal((1, 2, 2, 3, 3))
        np.testing.assert_array_equal(D.condconv_fc_form(t64(experts), t64([[1.0]])).data[0], experts[0])

    def test_mixture_matches_loop(self, f64, rng):
        experts = rng.standard_normal((4, 3, 3, 3, 3))
        alpha = rng.uniform(0, 1, (2, 4))
        np.testing.assert_allclose(D.condconv_mixture(t64(experts), t64(alpha)).data,
                                   ref.mixture_loop(experts, alpha), atol=1e-12)

    def test_layer_forms_agree(self, f64, rng):
        cfg = D.CondConvConfig(4, 4, 3, 3, m=4)
        a = D.CondConv2d(cfg, rng=np.random.default_rng(3), form="fc")
        b = D.CondConv2d(cfg, rng=np.random.default_rng(3), form="mixture")
        x = t64(rng.standard_normal((2, 4, 5, 5)))
        np.testing.assert_allclose(a(x).data, b(x).data, atol=1e-12)

    def test_expert_bank_is_m_times_static(self):
        layer = D.CondConv2d(D.CondConvConfig(8, 16, 3, 3, m=4))
        assert D.kernel_parameter_count(layer) == 4 * 16 * 8 * 9


@settings(max_examples=40, deadline=None)
@given(m=st.sampled_from([1, 2, 4, 8]), C=st.sampled_from([4, 8]), k=st.sampled_from([1, 3]),
       B=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_mixture_equals_fc_form(m, C, k, B, seed):
    rng = np.random.default_rng(seed)
    experts = rng.standard_normal((m, C, C, k, k))
    alpha = rng.uniform(0, 1, (B, m))
    with float64():
        a = D.condconv_mixture(t64(experts), t64(alpha)).data
        b = D.condconv_fc_form(t64(experts), t64(alpha)).data
    assert np.abs(a - b).max() < 1e-12


class TestSE:
    def test_zero_input_alpha_half(self, f64):
        layer = D.SEConv2d(D.SEConfig(8, 8, 3, 3, r=4))
        zero_biases(layer)
        np.testing.assert_array_equal(D.se_alpha(layer, t64(np.zeros((1, 8, 3, 3)))).data, 0.5)

    def test_alpha_matches_manual(self, f64, rng):
        layer = D.SEConv2d(D.SEConfig(8, 8, 3, 3, r=2), rng=rng)
        x = rng.standard_normal((2, 8, 3, 3))
        h = np.maximum(x.mean(axis=(2, 3)) @ layer.fc1.weight.data.T + layer.fc1.bias.data, 0)
        expect = ref.sigmoid(h @ layer.fc2.weight.data.T + layer.fc2.bias.data)
        a = layer.alpha(t64(x)).data
        np.testing.assert_allclose(a, expect, atol=1e-14)
        assert np.all((a > 0) & (a < 1))

    def test_unit_alpha_keeps_kernel(self, f64, rng):
        w = rng.standard_normal((4, 3, 3, 3))
        np.testing.assert_array_equal(D.se_kernel_form(t64(w), t64(np.ones((2, 4)))).data[1], w)

    def test_one_hot_alpha_keeps_one_filter(self, f64, rng):
        w = rng.standard_normal((4, 3, 3, 3))
        k = D.se_kernel_form(t64(w), t64(np.eye(4)[2][None])).data[0]
        assert [bool(k[c].any()) for c in range(4)] == [False, False, True, False]

    def test_kernel_feature_duality(self, f64, rng):
        w = rng.standard_normal((6, 4, 3, 3))
        x = rng.standard_normal((3, 4, 5, 5))
        alpha = rng.uniform(0, 1, (3, 6))
        y = D.dynamic_conv_apply(D.se_kernel_form(t64(w), t64(alpha)), t64(x), 1, 1).data
        expect = T.conv2d(t64(x), t64(w), pad=1).data * alpha[:, :, None, None]
        assert np.abs(y - expect).max() < 1e-12

    def test_feature_post_equals_kernel_placement(self, f64, rng):
        cfg_k = D.SEConfig(4, 6, 3, 3, r=2, placement="kernel")
        cfg_p = D.SEConfig(4, 6, 3, 3, r=2, placement="feature_post")
        a = D.SEConv2d(cfg_k, rng=np.random.default_rng(5))
        b = D.SEConv2d(cfg_p, rng=np.random.default_rng(5))
        x = t64(rng.standard_normal((2, 4, 5, 5)))
        np.testing.assert_allclose(a(x).data, b(x).data, atol=1e-12)

    def test_feature_pre_gates_input(self, f64, rng):
        layer = D.SEConv2d(D.SEConfig(4, 6, 3, 3, r=2, placement="feature_pre"), rng=rng)
        x = rng.standard_normal((2, 4, 5, 5))
        alpha = rng.uniform(0, 1, (2, 4))
        y = layer(t64(x), alpha=t64(alpha)).data
        expect = T.conv2d(t64(x * alpha[:, :, None, None]), layer.weight, pad=1).data
        np.testing.assert_allclose(y, expect, atol=1e-12)

    def test_se_adds_no_kernel_params(self):
        layer = D.SEConv2d(D.SEConfig(8, 8, 3, 3))
        assert D.kernel_parameter_count(layer) == 8 * 8 * 9


class TestExtremeCases:
    def test_condconv_is_one_group_fc(self, f64, rng):
        layer = D.CondConv2d(D.CondConvConfig(4, 4, 3, 3, m=4), rng=rng)
        fc = D.as_grouped_fc(layer)
        assert fc.groups == 1 and fc.in_features == 4
        alpha = t64(rng.uniform(0, 1, (3, 4)))
        np.testing.assert_allclose(fc(alpha).data.reshape(3, 4, 4, 3, 3),
                                   D.condconv_mixture(layer.experts, alpha).data, atol=1e-12)

    def test_se_is_c_group_fc(self, f64, rng):
        C = 8
        layer = D.SEConv2d(D.SEConfig(C, C, 3, 3, r=4), rng=rng)
        fc = D.as_grouped_fc(layer)
        assert fc.groups == C and fc.in_features == C
        alpha = t64(rng.uniform(0, 1, (2, C)))
        np.testing.assert_allclose(fc(alpha).data.reshape(2, C, C, 3, 3),
                                   D.se_kernel_form(layer.weight, alpha).data, atol=1e-12)

    def test_static_conv_has_no_fc_form(self):
        from weightnet.layers import Conv2d
        with pytest.raises(ConfigError):
            D.as_grouped_fc(Conv2d(2, 2))


def _end_to_end(layer, rng):
    x = t64(rng.standard_normal((2, layer.c_in, 5, 5)), grad=True)
    r = rng.standard_normal((2, layer.c_out, 5, 5))
    return gradcheck(lambda: (layer(x) * t64(r)).sum(), [x] + layer.parameters())


@pytest.mark.parametrize("instance", range(10))
def test_weightnet_end_to_end_gradient(f64, instance):
    rng = np.random.default_rng(100 + instance)
    M, G = [(1, 1), (2, 1), (2, 2), (4, 2), ("1/2", "1/2")][instance % 5]
    cfg = D.WeightNetConfig(4, 4, 3, 3, M=M, G=G, r=2, relu_between=bool(instance % 2))
    layer = D.WeightNetConv2d(cfg, pad=1, rng=rng)
    if cfg.relu_between:
        layer.fc1.bias.data[...] = 2.0
    assert _end_to_end(layer, rng) < FD_RTOL


@pytest.mark.parametrize("placement", ["kernel", "feature_pre", "feature_post"])
def test_se_and_condconv_gradients(f64, placement):
    rng = np.random.default_rng(7)
    se = D.SEConv2d(D.SEConfig(4, 4, 3, 3, r=2, placement=placement), pad=1, rng=rng)
    se.fc1.bias.data[...] = 2.0
    assert _end_to_end(se, rng) < FD_RTOL
    cc = D.CondConv2d(D.CondConvConfig(3, 4, 3, 3, m=2), pad=1, form="mixture", rng=rng)
    assert _end_to_end(cc, rng) < FD_RTOL


def test_different_gap_vectors_give_different_kernels(f64, rng):
    layer = D.WeightNetConv2d(D.WeightNetConfig(4, 4, 3, 3, M=2, G=2, r=2), rng=rng)
    x = rng.standard_normal((2, 4, 5, 5))
    x[1] += 1.0
    k = layer.kernels(t64(x)).data
    assert np.linalg.norm(k[0] - k[1]) > 0
