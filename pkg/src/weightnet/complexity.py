"""Parameter and multiply-accumulate accounting for static and dynamic convs.

Each conv layer is split into a convolution branch (the sliding-window
products) and a weight branch (everything that produces the kernel). Cheap
per-element work (pooling, sigmoid, batch norm) goes to an ``other`` bucket
that is reported but kept out of both branch totals.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import singledispatch
from typing import Iterable, TextIO

from .dynamic import CondConv2d, SEConv2d, WeightNetConfig, WeightNetConv2d
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import conv_output_size

BRANCHES = ("conv", "weight", "other")
FLOPS_CONVENTIONS = ("macs", "2macs")


@dataclass(frozen=True)
class LayerRecord:
    layer: str
    branch: str
    params: int
    macs: int
    kernel_params: int = 0


@dataclass
class ComplexityReport:
    records: list[LayerRecord] = field(default_factory=list)

    def total(self, branch: str) -> tuple[int, int]:
        rows = [r for r in self.records if r.branch == branch]
        return sum(r.params for r in rows), sum(r.macs for r in rows)

    @property
    def totals(self) -> dict[str, tuple[int, int]]:
        return {b: self.total(b) for b in BRANCHES}

    def kernel_params(self, layer: str | None = None) -> int:
        return sum(r.kernel_params for r in self.records if layer is None or r.layer == layer)

    def layer_params(self, layer: str, branches: Iterable[str] = ("conv", "weight")) -> int:
        return sum(r.params for r in self.records if r.layer == layer and r.branch in branches)

    def write_csv(self, fh: TextIO, flops_convention: str = "macs") -> None:
        if flops_convention not in FLOPS_CONVENTIONS:
            raise ValueError(f"flops convention must be one of {FLOPS_CONVENTIONS}")
        scale = 2 if flops_convention == "2macs" else 1
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "branch", "params", "macs"])
        for r in self.records:
            writer.writerow([r.layer, r.branch, r.params, r.macs * scale])

    def to_csv(self, flops_convention: str = "macs") -> str:
        buf = io.StringIO()
        self.write_csv(buf, flops_convention)
        return buf.getvalue()


def count_conv_branch(cfg, h: int, w: int, stride: int = 1, pad: int | None = None, groups: int = 1) -> int:
    """Exact MACs of the sliding-window products: h'*w'*C_out*(C_in/groups)*kh*kw."""
    pad = cfg.kh // 2 if pad is None else pad
    ho = conv_output_size(h, cfg.kh, stride, pad)
    wo = conv_output_size(w, cfg.kw, stride, pad)
    return ho * wo * cfg.c_out * (cfg.c_in // groups) * cfg.kh * cfg.kw


def _fc_params(i: int, o: int, bias: bool) -> int:
    return i * o + (o if bias else 0)


def count_weight_branch(cfg: WeightNetConfig) -> tuple[int, int]:
    """(params, macs) of the alpha generator plus the kernel-emitting grouped FC.

    Every weight-branch scalar is used once per sample, so MACs equal params.
    """
    gen = cfg.alpha_dim // cfg.groups * cfg.kernel_numel + (cfg.kernel_numel if cfg.kernel_bias else 0)
    alpha = _fc_params(cfg.c_in, cfg.hidden, cfg.alpha_bias) + _fc_params(cfg.hidden, cfg.alpha_dim, cfg.alpha_bias)
    params = gen + alpha
    return params, params


def weightnet_kernel_params(cfg: WeightNetConfig) -> int:
    return cfg.alpha_dim // cfg.groups * cfg.kernel_numel


@singledispatch
def layer_records(layer: Module, name: str, hw_in: tuple[int, int]) -> list[LayerRecord]:
    raise TypeError(f"no complexity rule for {type(layer).__name__}")


@layer_records.register
def _(layer: Conv2d, name, hw_in):
    h, w = hw_in
    macs = count_conv_branch(layer, h, w, layer.stride, layer.pad, layer.groups)
    params = layer.num_parameters()
    return [LayerRecord(name, "conv", params, macs, kernel_params=layer.weight.size)]


def _gap_other(name: str, c: int, hw: tuple[int, int], alpha_dim: int) -> LayerRecord:
    # pooling adds plus one sigmoid per alpha entry
    return LayerRecord(name, "other", 0, c * hw[0] * hw[1] + alpha_dim)


@layer_records.register
def _(layer: WeightNetConv2d, name, hw_in):
    cfg = layer.cfg
    macs = count_conv_branch(cfg, *hw_in, stride=layer.stride, pad=layer.pad)
    params, wmacs = count_weight_branch(cfg)
    return [
        LayerRecord(name, "conv", 0, macs),
        LayerRecord(name, "weight", params, wmacs, kernel_params=weightnet_kernel_params(cfg)),
        _gap_other(name, cfg.c_in, hw_in, cfg.alpha_dim),
    ]


@layer_records.register
def _(layer: CondConv2d, name, hw_in):
    cfg = layer.cfg
    macs = count_conv_branch(layer, *hw_in, stride=layer.stride, pad=layer.pad)
    kernel = layer.experts.size
    params = kernel + _fc_params(cfg.c_in, cfg.m, True)
    return [
        LayerRecord(name, "conv", 0, macs),
        LayerRecord(name, "weight", params, params, kernel_params=kernel),
        _gap_other(name, cfg.c_in, hw_in, cfg.m),
    ]


@layer_records.register
def _(layer: SEConv2d, name, hw_in):
    cfg = layer.cfg
    macs = count_conv_branch(layer, *hw_in, stride=layer.stride, pad=layer.pad)
    kernel = layer.weight.size
    alpha = _fc_params(cfg.c_in, cfg.hidden, True) + _fc_params(cfg.hidden, cfg.alpha_dim, True)
    gap = _gap_other(name, cfg.c_in, hw_in, cfg.alpha_dim)
    if cfg.placement == "kernel":
        return [
            LayerRecord(name, "conv", 0, macs),
            LayerRecord(name, "weight", kernel + alpha, kernel + alpha, kernel_params=kernel),
            gap,
        ]
    # feature-space gating: the static kernel stays in the conv branch
    h, w = hw_in
    ho = conv_output_size(h, cfg.kh, layer.stride, layer.pad)
    wo = conv_output_size(w, cfg.kw, layer.stride, layer.pad)
    scale_macs = cfg.c_in * h * w if cfg.placement == "feature_pre" else cfg.c_out * ho * wo
    return [
        LayerRecord(name, "conv", kernel, macs, kernel_params=kernel),
        LayerRecord(name, "weight", alpha, alpha),
        LayerRecord(name, "other", 0, gap.macs + scale_macs),
    ]


def _bn_record(name: str, bn: BatchNorm2d, hw_out: tuple[int, int]) -> LayerRecord:
    return LayerRecord(name, "other", bn.num_parameters(), 2 * bn.channels * hw_out[0] * hw_out[1])


def report(model, input_hw: tuple[int, int] | None = None) -> ComplexityReport:
    """Walk a model's conv layers and the head, summing both branches.

    ``model`` is anything with ``blocks`` and ``head`` (see ``PlugConvNet``);
    ``None`` or a model without blocks yields an empty report.
    """
    rep = ComplexityReport()
    if model is None or not getattr(model, "blocks", None):
        return rep
    if input_hw is None:
        raise ValueError("input_hw is required for a non-empty model")
    hw_out = input_hw
    for block, hw_in, hw_out in model.layer_plan(input_hw):
        rep.records.extend(layer_records(block.conv, block.name, hw_in))
        rep.records.append(_bn_record(f"{block.name}", block.bn, hw_out))
    head = model.head
    c = head.in_features
    rep.records.append(LayerRecord("head", "other", 0, c * hw_out[0] * hw_out[1]))
    rep.records.append(LayerRecord("head", "conv", head.num_parameters(), head.in_features * head.out_features))
    return rep
