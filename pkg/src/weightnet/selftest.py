"""Equivalence and gradient checks run in 64-bit mode by ``weightnet selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dynamic
from . import reference as ref
from . import tensor as T
from .layers import BatchNorm2d, Conv2d, FullyConnected, GroupedFullyConnected
from .numerics import FD_EPS, FD_REL_FLOOR, FD_RTOL, equiv_atol, float64
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    seconds: float


def _t(a, grad=False) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def gradcheck(loss_fn: Callable[[], Tensor], tensors: list[Tensor], eps: float = FD_EPS) -> float:
    """Max relative error between autodiff and central differences of ``loss_fn``."""
    analytic = T.backward(loss_fn(), tensors)
    numeric = ref.numerical_gradient(lambda: float(loss_fn().item()), [t.data for t in tensors], eps)
    return max(ref.max_relative_error(a, n, FD_REL_FLOOR) for a, n in zip(analytic, numeric))


# equivalence checks; each returns the max abs deviation -----------------------


def check_matmul(rng) -> float:
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    return float(np.abs(T.matmul(_t(a), _t(b)).data - ref.naive_matmul(a, b)).max())


def check_conv(rng) -> float:
    x, w = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((6, 2, 3, 3))
    err = 0.0
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        y = T.conv2d(_t(x), _t(w), groups=2, stride=stride, pad=pad).data
        err = max(err, float(np.abs(y - ref.naive_conv2d(x, w, 2, stride, pad)).max()))
    return err


def check_grouped_conv_split(rng) -> float:
    g = 4
    x, w = rng.standard_normal((2, 8, 6, 6)), rng.standard_normal((12, 2, 3, 3))
    y = T.conv2d(_t(x), _t(w), groups=g, pad=1).data
    parts = [T.conv2d(_t(x[:, 2 * k:2 * k + 2]), _t(w[3 * k:3 * k + 3]), pad=1).data for k in range(g)]
    return float(np.abs(y - np.concatenate(parts, axis=1)).max())


def check_grouped_fc(rng) -> float:
    fc = GroupedFullyConnected(8, 16, 4, rng=rng)
    x = rng.standard_normal((3, 8))
    dense = ref.block_diagonal(fc.weight.data)
    return float(np.abs(fc(_t(x)).data - x @ dense.T).max())


def check_condconv(rng) -> float:
    err = 0.0
    for m in (1, 2, 4, 8):
        experts = rng.standard_normal((m, 4, 4, 3, 3))
        alpha = rng.uniform(0, 1, (3, m))
        a = dynamic.condconv_mixture(_t(experts), _t(alpha)).data
        b = dynamic.condconv_fc_form(_t(experts), _t(alpha)).data
        err = max(err, float(np.abs(a - b).max()))
        err = max(err, float(np.abs(a - ref.mixture_loop(experts, alpha)).max()))
    return err


def check_se_duality(rng) -> float:
    w = rng.standard_normal((6, 4, 3, 3))
    x = rng.standard_normal((3, 4, 5, 5))
    alpha = rng.uniform(0, 1, (3, 6))
    kern = dynamic.se_kernel_form(_t(w), _t(alpha))
    y_kernel = dynamic.dynamic_conv_apply(kern, _t(x), 1, 1).data
    y_feature = T.conv2d(_t(x), _t(w), pad=1).data * alpha[:, :, None, None]
    return float(np.abs(y_kernel - y_feature).max())


def check_extreme_cases(rng) -> float:
    C, k = 4, 3
    cc = dynamic.CondConv2d(dynamic.CondConvConfig(C, C, k, k, m=3), rng=rng)
    se = dynamic.SEConv2d(dynamic.SEConfig(C, C, k, k, r=2), rng=rng)
    a_cc = _t(rng.uniform(0, 1, (2, 3)))
    a_se = _t(rng.uniform(0, 1, (2, C)))
    fc_cc, fc_se = dynamic.as_grouped_fc(cc), dynamic.as_grouped_fc(se)
    e1 = np.abs(fc_cc(a_cc).data.reshape(2, C, C, k, k) - cc.generate(a_cc).data).max()
    e2 = np.abs(fc_se(a_se).data.reshape(2, C, C, k, k) - se.generate(a_se).data).max()
    bad_groups = (fc_cc.groups != 1) or (fc_se.groups != C)
    return float(np.inf if bad_groups else max(e1, e2))


def check_batch_trick(rng) -> float:
    err = 0.0
    for B in (1, 2, 5):
        kern = rng.standard_normal((B, 3, 2, 3, 3))
        x = rng.standard_normal((B, 2, 5, 5))
        y = dynamic.dynamic_conv_apply(_t(kern), _t(x), 1, 1).data
        loop = ref.per_sample_conv(kern, x, 1, 1, conv=lambda a, b, g, s, p: T.conv2d(_t(a), _t(b), g, s, p).data)
        err = max(err, float(np.abs(y - loop).max()))
    return err


def check_param_count(rng) -> float:
    bad = 0
    for C, k in ((4, 1), (8, 3)):
        for G in (1, 2):
            for lam in (1, 2, 4, 8):
                cfg = dynamic.WeightNetConfig(C, C, k, k, M=lam * G, G=G)
                layer = dynamic.WeightNetConv2d(cfg, rng=rng)
                bad += layer.gen.weight.size != lam * C * C * k * k
    return float(bad)


def check_weightnet_forward(rng) -> float:
    cfg = dynamic.WeightNetConfig(4, 4, 3, 3, M=2, G=1, r=2)
    layer = dynamic.WeightNetConv2d(cfg, pad=1, rng=rng)
    x = rng.standard_normal((2, 4, 5, 5))
    gap = x.mean(axis=(2, 3))
    h = gap @ layer.fc1.weight.data.T + layer.fc1.bias.data
    alpha = ref.sigmoid(h @ layer.fc2.weight.data.T + layer.fc2.bias.data)
    dense = ref.block_diagonal(layer.gen.weight.data)
    kern = (alpha @ dense.T).reshape(2, 4, 4, 3, 3)
    expect = ref.per_sample_conv(kern, x, 1, 1)
    return float(np.abs(layer(_t(x)).data - expect).max())


EQUIVALENCE_CHECKS = {
    "matmul vs naive loop": check_matmul,
    "conv2d vs naive loop": check_conv,
    "grouped conv vs per-group concat": check_grouped_conv_split,
    "grouped fc vs dense block-diagonal": check_grouped_fc,
    "condconv mixture/fc equivalence": check_condconv,
    "se kernel/feature duality": check_se_duality,
    "grouped-fc extreme cases": check_extreme_cases,
    "batch-dimension trick": check_batch_trick,
    "weightnet forward vs manual composition": check_weightnet_forward,
    "weightnet parameter count": check_param_count,
}


# gradient checks; each returns the max relative error ------------------------


def grad_fc(rng) -> float:
    fc = FullyConnected(5, 3, rng=rng)
    x = _t(rng.standard_normal((4, 5)), grad=True)
    r = rng.standard_normal((4, 3))
    return gradcheck(lambda: (fc(x) * _t(r)).sum(), [x] + fc.parameters())


def grad_grouped_fc(rng) -> float:
    fc = GroupedFullyConnected(8, 12, 4, bias=True, rng=rng)
    x = _t(rng.standard_normal((3, 8)), grad=True)
    r = rng.standard_normal((3, 12))
    return gradcheck(lambda: (fc(x) * _t(r)).sum(), [x] + fc.parameters())


def grad_conv(rng) -> float:
    conv = Conv2d(4, 6, 3, stride=2, groups=2, bias=True, rng=rng)
    x = _t(rng.standard_normal((2, 4, 5, 5)), grad=True)
    r = rng.standard_normal((2, 6, 3, 3))
    return gradcheck(lambda: (conv(x) * _t(r)).sum(), [x] + conv.parameters())


def grad_batchnorm(rng) -> float:
    bn = BatchNorm2d(3)
    bn.weight.data[...] = rng.uniform(0.5, 1.5, 3)
    x = _t(rng.standard_normal((4, 3, 3, 3)), grad=True)
    r = rng.standard_normal((4, 3, 3, 3))
    return gradcheck(lambda: (bn(x) * _t(r)).sum(), [x] + bn.parameters())


def grad_pool_sigmoid_ce(rng) -> float:
    x = _t(rng.standard_normal((3, 4, 2, 2)), grad=True)
    labels = np.array([0, 3, 1])
    return gradcheck(lambda: T.cross_entropy(T.sigmoid(T.global_avg_pool(x)) * 3.0, labels), [x])


def _dynamic_grad(layer, rng) -> float:
    x = _t(rng.standard_normal((2, layer.c_in, 5, 5)), grad=True)
    r = rng.standard_normal((2, layer.c_out, 5, 5))
    return gradcheck(lambda: (layer(x) * _t(r)).sum(), [x] + layer.parameters())


def grad_weightnet(rng) -> float:
    cfg = dynamic.WeightNetConfig(4, 4, 3, 3, M=2, G=1, r=2)
    return _dynamic_grad(dynamic.WeightNetConv2d(cfg, pad=1, rng=rng), rng)


def grad_condconv(rng) -> float:
    return _dynamic_grad(dynamic.CondConv2d(dynamic.CondConvConfig(3, 4, 3, 3, m=3), pad=1, rng=rng), rng)


def grad_se(rng) -> float:
    # keep the hidden relu away from its kink so central differences are valid
    layer = dynamic.SEConv2d(dynamic.SEConfig(4, 4, 3, 3, r=2), pad=1, rng=rng)
    layer.fc1.bias.data[...] = 2.0
    return _dynamic_grad(layer, rng)


GRADIENT_CHECKS = {
    "gradient: fully-connected": grad_fc,
    "gradient: grouped fully-connected": grad_grouped_fc,
    "gradient: grouped strided conv2d": grad_conv,
    "gradient: batch norm": grad_batchnorm,
    "gradient: pool/sigmoid/cross-entropy": grad_pool_sigmoid_ce,
    "gradient: weightnet end-to-end": grad_weightnet,
    "gradient: condconv end-to-end": grad_condconv,
    "gradient: se kernel-form end-to-end": grad_se,
}


def run_selftest(seed: int = 0) -> list[CheckResult]:
    results = []
    with float64():
        atol = equiv_atol()
        for name, fn in EQUIVALENCE_CHECKS.items():
            t0 = time.perf_counter()
            err = fn(np.random.default_rng(seed))
            limit = 0.0 if fn is check_param_count else atol
            results.append(CheckResult(name, bool(err < limit if limit else err == 0), err, time.perf_counter() - t0))
        for name, fn in GRADIENT_CHECKS.items():
            t0 = time.perf_counter()
            err = fn(np.random.default_rng(seed))
            results.append(CheckResult(name, bool(err < FD_RTOL), err, time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  max error   seconds"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.error:9.2e}  {r.seconds:7.3f}")
    return "\n".join(lines)
