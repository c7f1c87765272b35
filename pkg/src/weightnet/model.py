"""A small plain CNN whose convolutions can be swapped per stage.

Each stage is a run of conv -> batch norm -> ReLU blocks; the first block of
a stage changes width and applies the stage stride. A global-average-pool
and one fully-connected layer form the classifier head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Iterator

import numpy as np

from . import tensor as T
from .dynamic import (
    CondConv2d,
    CondConvConfig,
    DynamicConv2d,
    SEConfig,
    SEConv2d,
    WeightNetConfig,
    WeightNetConv2d,
    as_fraction,
)
from .exceptions import ConfigError
from .layers import BatchNorm2d, Conv2d, FullyConnected, Module
from .tensor import Tensor, conv_output_size

CONV_KINDS = ("static", "se", "condconv", "weightnet")


@dataclass(frozen=True)
class ConvKind:
    kind: str = "static"
    m: int = 4
    M: Fraction = Fraction(1)
    G: Fraction = Fraction(1)
    r: int = 16
    placement: str = "kernel"
    relu_between: bool = False

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ConfigError(f"conv kind must be one of {CONV_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "M", as_fraction(self.M, "M"))
        object.__setattr__(self, "G", as_fraction(self.G, "G"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ConvKind":
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "static":
            return {"kind": "static"}
        if self.kind == "se":
            return {"kind": "se", "r": self.r, "placement": self.placement}
        if self.kind == "condconv":
            return {"kind": "condconv", "m": self.m}
        return {"kind": "weightnet", "M": str(self.M), "G": str(self.G), "r": self.r,
                "relu_between": self.relu_between}


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    conv: ConvKind = field(default_factory=ConvKind)
    stride: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.blocks < 1 or self.channels < 1 or self.stride < 1 or self.kernel_size < 1:
            raise ConfigError(f"stage needs positive blocks/channels/stride/kernel_size, got {self}")


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[StageSpec, ...]
    num_classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        stages = []
        for s in d["stages"]:
            s = dict(s)
            s["conv"] = ConvKind.from_dict(s.get("conv", {"kind": "static"}))
            stages.append(StageSpec(**s))
        return cls(stages=tuple(stages), num_classes=d.get("num_classes", 2), in_channels=d.get("in_channels", 1))

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": [dict(asdict(s), conv=s.conv.to_dict()) for s in self.stages],
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    def with_conv(self, conv: ConvKind, stages: list[int] | None = None) -> "ModelSpec":
        """Copy with ``conv`` swapped into the given stages (all by default)."""
        idx = range(len(self.stages)) if stages is None else stages
        new = [StageSpec(s.blocks, s.channels, conv if i in idx else s.conv, s.stride, s.kernel_size)
               for i, s in enumerate(self.stages)]
        return ModelSpec(tuple(new), self.num_classes, self.in_channels)


def make_conv(kind: ConvKind, c_in: int, c_out: int, k: int, stride: int, rng) -> Module:
    if kind.kind == "static":
        return Conv2d(c_in, c_out, k, stride, rng=rng)
    if kind.kind == "se":
        return SEConv2d(SEConfig(c_in, c_out, k, k, r=kind.r, placement=kind.placement), stride, rng=rng)
    if kind.kind == "condconv":
        return CondConv2d(CondConvConfig(c_in, c_out, k, k, m=kind.m), stride, rng=rng)
    cfg = WeightNetConfig(c_in, c_out, k, k, M=kind.M, G=kind.G, r=kind.r, relu_between=kind.relu_between)
    return WeightNetConv2d(cfg, stride, rng=rng)


class Block(Module):
    def __init__(self, name: str, conv: Module, channels: int):
        super().__init__()
        self.name = name
        self.conv = conv
        self.bn = BatchNorm2d(channels)

    @property
    def is_dynamic(self) -> bool:
        return isinstance(self.conv, DynamicConv2d)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        if trace is None:
            return T.relu(self.bn(self.conv(x)))
        trace.append((f"{self.name}.input", x))
        if self.is_dynamic:
            alpha = self.conv.alpha(x)
            trace.append((f"{self.name}.alpha", alpha))
            y = self.conv(x, alpha=alpha)
        else:
            y = self.conv(x)
        trace.append((f"{self.name}.conv", y))
        y = self.bn(y)
        trace.append((f"{self.name}.bn", y))
        y = T.relu(y)
        trace.append((f"{self.name}.relu", y))
        return y


class PlugConvNet(Module):
    """Stages of conv/BN/ReLU blocks followed by GAP and a linear classifier."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        blocks = []
        c = spec.in_channels
        for si, stage in enumerate(spec.stages):
            for bi in range(stage.blocks):
                name = f"stage{si}.block{bi}"
                stride = stage.stride if bi == 0 else 1
                try:
                    conv = make_conv(stage.conv, c, stage.channels, stage.kernel_size, stride, rng)
                except ConfigError as exc:
                    raise ConfigError(f"stage {si} ({name}, {stage.conv.kind}): {exc}") from None
                blocks.append(Block(name, conv, stage.channels))
                c = stage.channels
        self.blocks = blocks
        self.head = FullyConnected(c, spec.num_classes, bias=True, rng=rng)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, trace)
        pooled = T.global_avg_pool(x)
        logits = self.head(pooled)
        if trace is not None:
            trace.append(("pool", pooled))
            trace.append(("logits", logits))
        return logits

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(f"no layer named {name!r}; layers are {[b.name for b in self.blocks]}")

    def layer_plan(self, hw: tuple[int, int]) -> Iterator[tuple[Block, tuple[int, int], tuple[int, int]]]:
        """Yield (block, input hw, output hw) in forward order."""
        h, w = hw
        for block in self.blocks:
            conv = block.conv
            ho = conv_output_size(h, conv.kh, conv.stride, conv.pad)
            wo = conv_output_size(w, conv.kw, conv.stride, conv.pad)
            yield block, (h, w), (ho, wo)
            h, w = ho, wo


def build_model(spec: ModelSpec, seed: int = 0) -> PlugConvNet:
    return PlugConvNet(spec, seed)
