"""Weight-generating convolutions: WeightNet, CondConv and kernel-level SE.

All three share one shape of computation. A pooled feature vector is turned
into an activation vector ``alpha`` by one or two fully-connected layers and
a sigmoid, and a (grouped) fully-connected layer maps ``alpha`` to a
per-sample kernel of shape (B, C_out, C_in, kh, kw). The layers differ only
in that last layer's input width and group count:

=========  ==========  ===========  ======
kind       input       groups       lambda
=========  ==========  ===========  ======
condconv   m           1            m
senet      C           C            1
weightnet  M*C         G*C          M/G
=========  ==========  ===========  ======

Per-sample kernels are applied by folding the batch into the channel axis
and running one grouped convolution with ``groups=B``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal, NamedTuple, Union

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .layers import FullyConnected, GroupedFullyConnected, Module, _uniform
from .numerics import get_default_dtype
from .tensor import DimensionError, Parameter, Tensor

RationalLike = Union[int, float, str, Fraction]


def as_fraction(value: RationalLike, name: str = "value") -> Fraction:
    """Parse ints, fraction strings like ``"1/2"`` or floats into a reduced Fraction."""
    try:
        if isinstance(value, float):
            frac = Fraction(value).limit_denominator(10_000)
        else:
            frac = Fraction(value)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ConfigError(f"{name}={value!r} is not a rational number") from exc
    if frac <= 0:
        raise ConfigError(f"{name}={value!r} must be positive")
    return frac


@dataclass(frozen=True)
class WeightNetConfig:
    c_in: int
    c_out: int
    kh: int
    kw: int
    M: Fraction = Fraction(1)
    G: Fraction = Fraction(1)
    r: int = 16
    relu_between: bool = False
    alpha_bias: bool = True
    kernel_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "M", as_fraction(self.M, "M"))
        object.__setattr__(self, "G", as_fraction(self.G, "G"))
        for name in ("c_in", "c_out", "kh", "kw", "r"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"WeightNetConfig.{name} must be >= 1, got {getattr(self, name)}")
        if (self.M * self.c_in).denominator != 1:
            raise ConfigError(f"M*C_in must be an integer: M={self.M}, C_in={self.c_in}")
        if (self.G * self.c_in).denominator != 1:
            raise ConfigError(f"G*C_in must be an integer: G={self.G}, C_in={self.c_in}")
        if self.alpha_dim % self.groups:
            raise ConfigError(
                f"group count G*C_in={self.groups} must divide input width M*C_in={self.alpha_dim}"
            )
        if self.kernel_numel % self.groups:
            raise ConfigError(
                f"group count G*C_in={self.groups} must divide kernel size "
                f"C_out*C_in*kh*kw={self.kernel_numel}"
            )

    @property
    def alpha_dim(self) -> int:
        return int(self.M * self.c_in)

    @property
    def groups(self) -> int:
        return int(self.G * self.c_in)

    @property
    def lam(self) -> Fraction:
        return self.M / self.G

    @property
    def hidden(self) -> int:
        return max(1, self.c_in // self.r)

    @property
    def kernel_numel(self) -> int:
        return self.c_out * self.c_in * self.kh * self.kw


@dataclass(frozen=True)
class CondConvConfig:
    c_in: int
    c_out: int
    kh: int
    kw: int
    m: int = 4

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError(f"CondConv needs m >= 1 experts, got {self.m}")
        for name in ("c_in", "c_out", "kh", "kw"):
            if getattr(self, name) < 1:
                raise ConfigError(f"CondConvConfig.{name} must be >= 1")

    @property
    def expert_shape(self) -> tuple[int, ...]:
        return (self.m, self.c_out, self.c_in, self.kh, self.kw)


SEPlacement = Literal["feature_pre", "feature_post", "kernel"]


@dataclass(frozen=True)
class SEConfig:
    c_in: int
    c_out: int
    kh: int
    kw: int
    r: int = 16
    placement: SEPlacement = "kernel"

    def __post_init__(self):
        if self.placement not in ("feature_pre", "feature_post", "kernel"):
            raise ConfigError(f"SE placement must be feature_pre, feature_post or kernel, got {self.placement!r}")
        if self.r < 1:
            raise ConfigError("SE reduction ratio r must be >= 1")

    @property
    def hidden(self) -> int:
        return max(1, self.c_in // self.r)

    @property
    def alpha_dim(self) -> int:
        return self.c_in if self.placement == "feature_pre" else self.c_out


@dataclass
class GeneratedKernel:
    """Per-sample convolution weights, shape (B, C_out, C_in, kh, kw)."""

    data: np.ndarray
    source: str = ""
    batch_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 5:
            raise DimensionError(f"GeneratedKernel needs 5-d (B, C_out, C_in, kh, kw) data, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"GeneratedKernel from {self.source or 'unknown'} has non-finite entries")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    def sample(self, b: int) -> np.ndarray:
        return self.data[b]


class GroupedFCRow(NamedTuple):
    input_size: int
    groups: int
    lam: Fraction
    output_size: int


def grouped_fc_config_of(kind: str, *, C: int, kh: int = 1, kw: int = 1, m: int | None = None,
                     M: RationalLike | None = None, G: RationalLike | None = None) -> GroupedFCRow:
    """Shape of the kernel-emitting grouped FC layer for each method."""
    out = C * C * kh * kw
    if kind == "condconv":
        if m is None or m < 1:
            raise ConfigError("condconv needs m >= 1")
        return GroupedFCRow(m, 1, Fraction(m), out)
    if kind == "senet":
        return GroupedFCRow(C, C, Fraction(1), out)
    if kind == "weightnet":
        cfg = WeightNetConfig(C, C, kh, kw, M=1 if M is None else M, G=1 if G is None else G)
        return GroupedFCRow(cfg.alpha_dim, cfg.groups, cfg.lam, out)
    raise ConfigError(f"unknown kind {kind!r}; expected condconv, senet or weightnet")


# kernel application -------------------------------------------------------------


def dynamic_conv_apply(kernels, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Convolve each sample with its own kernel using one grouped convolution.

    x (B, C_in, h, w) becomes (1, B*C_in, h, w), the kernels become
    (B*C_out, C_in, kh, kw), and a conv with ``groups=B`` keeps samples apart.
    """
    if isinstance(kernels, GeneratedKernel):
        kernels = Tensor(kernels.data, dtype=x.dtype)
    if kernels.ndim != 5:
        raise DimensionError(f"dynamic_conv_apply: kernels must be (B, C_out, C_in, kh, kw), got {kernels.shape}")
    B, Co, Ci, kh, kw = kernels.shape
    if x.ndim != 4 or x.shape[0] != B or x.shape[1] != Ci:
        raise DimensionError(f"dynamic_conv_apply: kernels {kernels.shape} do not match input {x.shape}")
    h, w = x.shape[2:]
    folded = T.reshape(x, (1, B * Ci, h, w))
    weight = T.reshape(kernels, (B * Co, Ci, kh, kw))
    y = T.conv2d(folded, weight, groups=B, stride=stride, pad=pad)
    return T.reshape(y, (B, Co) + y.shape[2:])


def condconv_mixture(experts: Tensor, alpha: Tensor) -> Tensor:
    """W'_b = sum_i alpha[b, i] * W_i, accumulated expert by expert."""
    m = experts.shape[0]
    if alpha.ndim != 2 or alpha.shape[1] != m:
        raise DimensionError(f"condconv_mixture: alpha {alpha.shape} vs {m} experts")
    B = alpha.shape[0]
    bshape = (B, 1, 1, 1, 1)
    out = None
    for i in range(m):
        term = T.reshape(alpha[:, i], bshape) * T.reshape(experts[i], (1,) + experts.shape[1:])
        out = term if out is None else out + term
    return out


def condconv_fc_form(experts: Tensor, alpha: Tensor) -> Tensor:
    """The same mixture as one FC layer: alpha (B, m) @ W (m, C_out*C_in*kh*kw)."""
    m = experts.shape[0]
    if alpha.ndim != 2 or alpha.shape[1] != m:
        raise DimensionError(f"condconv_fc_form: alpha {alpha.shape} vs {m} experts")
    flat = T.reshape(experts, (m, int(np.prod(experts.shape[1:]))))
    return T.reshape(T.matmul(alpha, flat), (alpha.shape[0],) + experts.shape[1:])


def se_kernel_form(w_static: Tensor, alpha: Tensor) -> Tensor:
    """Scale output filter c of a static kernel by alpha[b, c], per sample."""
    Co = w_static.shape[0]
    if alpha.ndim != 2 or alpha.shape[1] != Co:
        raise DimensionError(f"se_kernel_form: alpha {alpha.shape} vs kernel {w_static.shape}")
    B = alpha.shape[0]
    return T.reshape(alpha, (B, Co, 1, 1, 1)) * T.reshape(w_static, (1,) + w_static.shape)


# layers -------------------------------------------------------------------------


class DynamicConv2d(Module):
    """Common surface: ``alpha(x)``, ``generate(alpha)`` and ``forward``."""

    kind = "dynamic"

    def __init__(self, c_in: int, c_out: int, kh: int, kw: int, stride: int, pad: int | None):
        super().__init__()
        self.c_in, self.c_out, self.kh, self.kw = c_in, c_out, kh, kw
        self.stride = stride
        self.pad = kh // 2 if pad is None else pad

    def alpha(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def generate(self, alpha: Tensor) -> Tensor:
        raise NotImplementedError

    def kernels(self, x: Tensor) -> Tensor:
        return self.generate(self.alpha(x))

    def forward(self, x: Tensor, alpha: Tensor | None = None) -> Tensor:
        # ``alpha`` lets oracles inject exact activation values, skipping the sigmoid.
        if alpha is None:
            alpha = self.alpha(x)
        return dynamic_conv_apply(self.generate(alpha), x, self.stride, self.pad)


class WeightNetConv2d(DynamicConv2d):
    """GAP -> FC -> FC -> sigmoid -> grouped FC -> per-sample kernel.

    No nonlinearity sits between the two alpha FCs unless
    ``cfg.relu_between`` is set.
    """

    kind = "weightnet"

    def __init__(self, cfg: WeightNetConfig, stride: int = 1, pad: int | None = None, rng=None):
        super().__init__(cfg.c_in, cfg.c_out, cfg.kh, cfg.kw, stride, pad)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.fc1 = FullyConnected(cfg.c_in, cfg.hidden, bias=cfg.alpha_bias, rng=rng)
        self.fc2 = FullyConnected(cfg.hidden, cfg.alpha_dim, bias=cfg.alpha_bias, rng=rng)
        self.gen = GroupedFullyConnected(cfg.alpha_dim, cfg.kernel_numel, cfg.groups, bias=cfg.kernel_bias, rng=rng)

    def alpha(self, x: Tensor) -> Tensor:
        h = self.fc1(T.global_avg_pool(x))
        if self.cfg.relu_between:
            h = T.relu(h)
        return T.sigmoid(self.fc2(h))

    def generate(self, alpha: Tensor) -> Tensor:
        if alpha.ndim != 2 or alpha.shape[1] != self.cfg.alpha_dim:
            raise DimensionError(f"weightnet_generate: alpha {alpha.shape}, expected (B, {self.cfg.alpha_dim})")
        flat = self.gen(alpha)
        return T.reshape(flat, (alpha.shape[0], self.c_out, self.c_in, self.kh, self.kw))


class CondConv2d(DynamicConv2d):
    """Mixture of ``m`` expert kernels gated by sigmoid(FC(GAP(x)))."""

    kind = "condconv"

    def __init__(self, cfg: CondConvConfig, stride: int = 1, pad: int | None = None,
                 form: Literal["fc", "mixture"] = "fc", rng=None):
        super().__init__(cfg.c_in, cfg.c_out, cfg.kh, cfg.kw, stride, pad)
        if form not in ("fc", "mixture"):
            raise ConfigError(f"CondConv form must be 'fc' or 'mixture', got {form!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.form = form
        self.route = FullyConnected(cfg.c_in, cfg.m, bias=True, rng=rng)
        self.experts = Parameter(np.zeros(cfg.expert_shape, dtype=get_default_dtype()))
        self.reset_parameters(rng)

    def reset_parameters(self, rng):
        self.experts.data[...] = _uniform(rng, self.experts.shape, self.c_in * self.kh * self.kw)

    def alpha(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.route(T.global_avg_pool(x)))

    def generate(self, alpha: Tensor) -> Tensor:
        if self.form == "mixture":
            return condconv_mixture(self.experts, alpha)
        return condconv_fc_form(self.experts, alpha)


class SEConv2d(DynamicConv2d):
    """Static conv with squeeze-and-excitation gating.

    ``placement="kernel"`` scales the kernel's output filters per sample;
    ``feature_pre``/``feature_post`` gate the input/output feature maps.
    """

    kind = "se"

    def __init__(self, cfg: SEConfig, stride: int = 1, pad: int | None = None, rng=None):
        super().__init__(cfg.c_in, cfg.c_out, cfg.kh, cfg.kw, stride, pad)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.fc1 = FullyConnected(cfg.c_in, cfg.hidden, bias=True, rng=rng)
        self.fc2 = FullyConnected(cfg.hidden, cfg.alpha_dim, bias=True, rng=rng)
        self.weight = Parameter(np.zeros((cfg.c_out, cfg.c_in, cfg.kh, cfg.kw), dtype=get_default_dtype()))
        self.reset_parameters(rng)

    def reset_parameters(self, rng):
        self.weight.data[...] = _uniform(rng, self.weight.shape, self.c_in * self.kh * self.kw)

    def alpha(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))

    def generate(self, alpha: Tensor) -> Tensor:
        if self.cfg.placement != "kernel":
            raise ConfigError(f"SE placement {self.cfg.placement!r} does not generate kernels")
        return se_kernel_form(self.weight, alpha)

    def forward(self, x: Tensor, alpha: Tensor | None = None) -> Tensor:
        if alpha is None:
            alpha = self.alpha(x)
        B = x.shape[0]
        if self.cfg.placement == "feature_pre":
            x = x * T.reshape(alpha, (B, self.c_in, 1, 1))
            return T.conv2d(x, self.weight, 1, self.stride, self.pad)
        if self.cfg.placement == "feature_post":
            y = T.conv2d(x, self.weight, 1, self.stride, self.pad)
            return y * T.reshape(alpha, (B, self.c_out, 1, 1))
        return dynamic_conv_apply(self.generate(alpha), x, self.stride, self.pad)


# functional aliases -------------------------------------------------------------


def alpha_weightnet(layer: WeightNetConv2d, x: Tensor) -> Tensor:
    return layer.alpha(x)


def weightnet_generate(layer: WeightNetConv2d, alpha: Tensor) -> Tensor:
    return layer.generate(alpha)


def condconv_alpha(layer: CondConv2d, x: Tensor) -> Tensor:
    return layer.alpha(x)


def se_alpha(layer: SEConv2d, x: Tensor) -> Tensor:
    return layer.alpha(x)


def as_grouped_fc(layer: DynamicConv2d) -> GroupedFullyConnected:
    """Re-express a CondConv or kernel-SE layer's kernel step as a grouped FC.

    CondConv becomes one group with ``m`` inputs; SE becomes ``C_out`` groups,
    one input each. The returned layer shares no storage with ``layer``.
    """
    if isinstance(layer, CondConv2d):
        m = layer.cfg.m
        fc = GroupedFullyConnected(m, layer.cfg.c_out * layer.c_in * layer.kh * layer.kw, 1, bias=False)
        fc.weight.data[...] = layer.experts.data.reshape(m, -1).T[None]
        return fc
    if isinstance(layer, SEConv2d) and layer.cfg.placement == "kernel":
        Co = layer.c_out
        per = layer.c_in * layer.kh * layer.kw
        fc = GroupedFullyConnected(Co, Co * per, Co, bias=False)
        fc.weight.data[...] = layer.weight.data.reshape(Co, per, 1)
        return fc
    if isinstance(layer, WeightNetConv2d):
        fc = GroupedFullyConnected(layer.gen.in_features, layer.gen.out_features, layer.gen.groups,
                                   bias=layer.gen.bias is not None)
        for dst, src in zip(fc.parameters(), layer.gen.parameters()):
            dst.data[...] = src.data
        return fc
    raise ConfigError(f"{type(layer).__name__} has no grouped-FC kernel form")


def kernel_parameter_count(layer: Module) -> int:
    """Scalars that parameterize the kernel itself, excluding the alpha generator."""
    if isinstance(layer, WeightNetConv2d):
        return layer.gen.num_parameters()
    if isinstance(layer, CondConv2d):
        return layer.experts.size
    if isinstance(layer, SEConv2d):
        return layer.weight.size
    weight = getattr(layer, "weight", None)
    return weight.size if weight is not None else 0
