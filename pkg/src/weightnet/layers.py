"""Parameterized layers: dense and grouped fully-connected, static conv, batch norm."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .exceptions import ConfigError
from .numerics import get_default_dtype
from .tensor import Parameter, Tensor


class Module:
    """Minimal parameter container.

    Child modules, parameters and lists of modules are discovered from
    instance attributes in assignment order, which fixes parameter naming
    and initialization order.
    """

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.modules(prefix):
            for bname, buf in getattr(mod, "_buffers", {}).items():
                yield (f"{mname}.{bname}" if mname else bname), buf

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if own[name].shape != tuple(arr.shape):
                raise ConfigError(f"state {name}: shape {tuple(arr.shape)} != expected {own[name].shape}")
            own[name][...] = arr

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Re-initialize this module's own parameters (not children's)."""


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(get_default_dtype())


def init_params(module: Module, rng_seed: int) -> None:
    """Deterministically re-initialize every parameter under ``module``.

    Weights are drawn from U(-s, s) with s = 1/sqrt(fan_in), where fan_in is
    the per-group input width for grouped layers. Biases are zeroed.
    """
    rng = np.random.default_rng(rng_seed)
    for _, mod in module.modules():
        mod.reset_parameters(rng)


class FullyConnected(Module):
    """y = x W^T + b for x of shape (B, in_features)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ConfigError(f"FullyConnected needs positive widths, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        dtype = get_default_dtype()
        self.weight = Parameter(np.zeros((out_features, in_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None
        self.reset_parameters(rng if rng is not None else np.random.default_rng(0))

    @property
    def fan_in(self) -> int:
        return self.in_features

    def reset_parameters(self, rng):
        self.weight.data[...] = _uniform(rng, self.weight.shape, self.fan_in)
        if self.bias is not None:
            self.bias.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise T.DimensionError(f"FullyConnected({self.in_features}->{self.out_features}) got input {x.shape}")
        y = T.matmul(x, T.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class GroupedFullyConnected(Module):
    """Fully-connected layer whose dense matrix is block diagonal.

    Only the ``groups`` diagonal blocks are stored, as one (g, o/g, i/g)
    parameter; group k maps input slice k to output slice k.
    """

    def __init__(self, in_features: int, out_features: int, groups: int, bias: bool = False, rng=None):
        super().__init__()
        if groups < 1 or in_features % groups or out_features % groups:
            raise ConfigError(
                f"GroupedFullyConnected: groups={groups} must divide in={in_features} and out={out_features}"
            )
        self.in_features = in_features
        self.out_features = out_features
        self.groups = groups
        dtype = get_default_dtype()
        self.weight = Parameter(np.zeros((groups, out_features // groups, in_features // groups), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None
        self.reset_parameters(rng if rng is not None else np.random.default_rng(0))

    @property
    def fan_in(self) -> int:
        return self.in_features // self.groups

    def reset_parameters(self, rng):
        self.weight.data[...] = _uniform(rng, self.weight.shape, self.fan_in)
        if self.bias is not None:
            self.bias.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise T.DimensionError(
                f"GroupedFullyConnected({self.in_features}->{self.out_features}, g={self.groups}) got input {x.shape}"
            )
        B, g = x.shape[0], self.groups
        xg = T.transpose(T.reshape(x, (B, g, self.in_features // g)), (1, 0, 2))
        yg = T.bmm(xg, T.transpose(self.weight, (0, 2, 1)))
        y = T.reshape(T.transpose(yg, (1, 0, 2)), (B, self.out_features))
        return y + self.bias if self.bias is not None else y


def grouped_fc_forward(layer: GroupedFullyConnected, x: Tensor) -> Tensor:
    return layer(x)


class Conv2d(Module):
    """Static (sample-independent) convolution."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1, pad: int | None = None,
                 groups: int = 1, bias: bool = False, rng=None):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ConfigError(f"Conv2d: groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.kh = self.kw = kernel_size
        self.stride = stride
        self.pad = kernel_size // 2 if pad is None else pad
        self.groups = groups
        dtype = get_default_dtype()
        self.weight = Parameter(np.zeros((c_out, c_in // groups, kernel_size, kernel_size), dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype)) if bias else None
        self.reset_parameters(rng if rng is not None else np.random.default_rng(0))

    @property
    def fan_in(self) -> int:
        return (self.c_in // self.groups) * self.kh * self.kw

    def reset_parameters(self, rng):
        self.weight.data[...] = _uniform(rng, self.weight.shape, self.fan_in)
        if self.bias is not None:
            self.bias.data[...] = 0

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.groups, self.stride, self.pad)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, self.c_out, 1, 1))
        return y


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def reset_parameters(self, rng):
        self.weight.data[...] = 1
        self.bias.data[...] = 0
        self._buffers["running_mean"][...] = 0
        self._buffers["running_var"][...] = 1

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            y, mu, var = T.batch_norm(x, self.weight, self.bias, self.eps)
            n = x.size // self.channels
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mu
            rv[...] = (1 - m) * rv + m * unbiased
            return y
        shape = (1, self.channels) + (1,) * (x.ndim - 2)
        inv = 1.0 / np.sqrt(self._buffers["running_var"] + self.eps)
        scale = T.reshape(self.weight * inv.astype(x.dtype), shape)
        shift = T.reshape(self.bias, shape)
        centered = x - self._buffers["running_mean"].reshape(shape).astype(x.dtype)
        return centered * scale + shift
