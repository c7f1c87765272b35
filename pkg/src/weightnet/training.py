"""Desk-scale supervised training: SGD with momentum, cross-entropy, linear LR decay."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .complexity import report
from .data import Dataset
from .exceptions import ConfigError, NumericalError
from .formats import write_checkpoint
from .layers import Module
from .model import ConvKind, ModelSpec, build_model
from .tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.wnck"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    record_time: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimizer settings lr={self.lr} momentum={self.momentum} "
                              f"weight_decay={self.weight_decay}")


class SGD:
    """Heavy-ball SGD with L2 weight decay on multi-dimensional weights."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype, copy=False)


def linear_decay(lr0: float, step: int, total_steps: int) -> float:
    return lr0 * (1.0 - step / max(total_steps, 1))


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(model(Tensor(images[start:start + batch_size])).data)
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else 0.0


def evaluate(model: Module, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in [0, 1] using inference-mode batch norm."""
    return top1(predict_logits(model, data.images, batch_size), data.labels)


def first_nonfinite(model: Module, images: np.ndarray) -> str:
    """Name the first parameter or intermediate tensor holding NaN/Inf."""
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name}"
    saved = {k: v.copy() for k, v in model.named_buffers()}
    trace: list = []
    try:
        with T.no_grad(), np.errstate(all="ignore"):
            model(Tensor(images), trace=trace)
    finally:
        for k, v in model.named_buffers():
            v[...] = saved[k]
    for name, t in trace:
        if not np.all(np.isfinite(t.data)):
            return name
    return "loss"


def train(model: Module, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          out_dir: str | os.PathLike | None = None) -> list[dict]:
    """Train ``model`` in place and return one metrics dict per epoch.

    With ``out_dir`` set, each epoch's metrics are appended to
    ``metrics.jsonl`` and the final parameters go to ``checkpoint.wnck``.
    ``seconds`` is only measured when ``cfg.record_time`` is set; otherwise
    it is written as 0.0 so identical runs give identical logs.
    """
    eval_data = eval_data if eval_data is not None else data
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    metrics_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics_path = Path(out_dir) / METRICS_FILE
        metrics_path.write_text("")

    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(data.images[idx])
            loss = T.cross_entropy(model(x), data.labels[idx])
            value = float(loss.item())
            if not math.isfinite(value):
                where = first_nonfinite(model, data.images[idx])
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} step {step}; first non-finite tensor: {where}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step(linear_decay(cfg.lr, step, total))
            loss_sum += value * len(idx)
            step += 1
        acc = evaluate(model, eval_data)
        seconds = time.perf_counter() - t0
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "eval_top1": acc,
            "seconds": round(seconds, 3) if cfg.record_time else 0.0,
        }
        logger.info("epoch %d loss %.4f top1 %.4f (%.1fs)", epoch, record["train_loss"], acc, seconds)
        history.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
    if out_dir is not None:
        write_checkpoint(Path(out_dir) / CHECKPOINT_FILE, model.state_dict())
    return history


def sweep(base: ModelSpec, kinds: Iterable[tuple[str, ConvKind]], data: Dataset, eval_data: Dataset,
          cfg: TrainConfig, stages: list[int] | None = None) -> list[dict]:
    """Train one model per conv kind and tabulate size and accuracy."""
    hw = data.image_shape[1:]
    rows = []
    for label, kind in kinds:
        spec = base.with_conv(kind, stages)
        model = build_model(spec, seed=cfg.seed)
        hist = train(model, data, cfg, eval_data)
        rep = report(model, hw)
        rows.append({
            "label": label,
            "kernel_params": rep.kernel_params(),
            "params": model.num_parameters(),
            "conv_macs": rep.total("conv")[1],
            "weight_macs": rep.total("weight")[1],
            "eval_top1": hist[-1]["eval_top1"] if hist else evaluate(model, eval_data),
        })
    return rows


def lambda_sweep(base: ModelSpec, data: Dataset, eval_data: Dataset, cfg: TrainConfig,
                 lambdas: Sequence[int] = (1, 2, 4), G: int = 2, stages: list[int] | None = None) -> list[dict]:
    """WeightNet with G fixed and M = lambda * G."""
    kinds = [(f"lambda={lam}", ConvKind("weightnet", M=lam * G, G=G)) for lam in lambdas]
    return sweep(base, kinds, data, eval_data, cfg, stages)


def group_sweep(base: ModelSpec, data: Dataset, eval_data: Dataset, cfg: TrainConfig,
                groups: Sequence[int] = (1, 2, 4), stages: list[int] | None = None) -> list[dict]:
    """WeightNet with lambda fixed at 1 (M = G)."""
    kinds = [(f"G={g}", ConvKind("weightnet", M=g, G=g)) for g in groups]
    return sweep(base, kinds, data, eval_data, cfg, stages)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
