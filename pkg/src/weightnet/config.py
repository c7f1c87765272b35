"""Run configuration: a JSON document validated against a strict schema."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .data import SYNTH_TASKS, Dataset, load_idx_dataset, synth_dataset
from .exceptions import ConfigError
from .formats import FormatError, idx_shape
from .model import CONV_KINDS, ModelSpec
from .training import TrainConfig

_RATIONAL = {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "string", "pattern": r"^\s*\d+(\s*/\s*\d+)?\s*$"}]}
_POS_INT = {"type": "integer", "minimum": 1}

CONV_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": list(CONV_KINDS)},
        "m": _POS_INT,
        "M": _RATIONAL,
        "G": _RATIONAL,
        "r": _POS_INT,
        "placement": {"enum": ["feature_pre", "feature_post", "kernel"]},
        "relu_between": {"type": "boolean"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

STAGE_SCHEMA = {
    "type": "object",
    "properties": {
        "blocks": _POS_INT,
        "channels": _POS_INT,
        "conv": CONV_SCHEMA,
        "stride": _POS_INT,
        "kernel_size": _POS_INT,
    },
    "required": ["blocks", "channels"],
    "additionalProperties": False,
}

SYNTH_DATA_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"const": "synthetic"},
        "task": {"enum": list(SYNTH_TASKS)},
        "n_train": _POS_INT,
        "n_eval": _POS_INT,
        "seed": {"type": "integer"},
        "n_classes": {"type": "integer", "minimum": 2},
        "size": {"type": "integer", "minimum": 4},
    },
    "required": ["kind", "task", "n_train", "n_eval"],
    "additionalProperties": False,
}

IDX_DATA_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"const": "idx"},
        "train_images": {"type": "string"},
        "train_labels": {"type": "string"},
        "eval_images": {"type": "string"},
        "eval_labels": {"type": "string"},
    },
    "required": ["kind", "train_images", "train_labels", "eval_images", "eval_labels"],
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "model": {
            "type": "object",
            "properties": {
                "stages": {"type": "array", "items": STAGE_SCHEMA, "minItems": 1},
                "num_classes": {"type": "integer", "minimum": 2},
                "in_channels": _POS_INT,
            },
            "required": ["stages"],
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": _POS_INT,
                "lr": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "weight_decay": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
                "record_time": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "data": {"oneOf": [SYNTH_DATA_SCHEMA, IDX_DATA_SCHEMA]},
        "output": {"type": "string", "minLength": 1},
    },
    "required": ["model", "data", "output"],
    "additionalProperties": False,
}


@dataclass
class RunConfig:
    model: ModelSpec
    train: TrainConfig
    data: dict[str, Any]
    output: Path
    base_dir: Path

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def image_shape(self) -> tuple[int, int, int]:
        """(C, H, W) of the configured data, without loading pixels."""
        d = self.data
        if d["kind"] == "synthetic":
            c = 1 if d["task"] == "striped-textures" else 3
            return (c, d.get("size", 16), d.get("size", 16))
        shape = idx_shape(self.resolve(d["train_images"]))
        return (1,) + tuple(shape[1:]) if len(shape) == 3 else tuple(shape[1:])

    def load_data(self) -> tuple[Dataset, Dataset]:
        d = self.data
        if d["kind"] == "synthetic":
            n_train, n_eval = d["n_train"], d["n_eval"]
            full = synth_dataset(d["task"], n_train + n_eval, d.get("seed", 0), d.get("n_classes", 2),
                                 d.get("size", 16))
            return full.split(n_train)
        try:
            train = load_idx_dataset(self.resolve(d["train_images"]), self.resolve(d["train_labels"]))
            ev = load_idx_dataset(self.resolve(d["eval_images"]), self.resolve(d["eval_labels"]))
        except FileNotFoundError as exc:
            raise ConfigError(f"data file not found: {exc.filename}") from None
        except FormatError as exc:
            raise ConfigError(str(exc)) from None
        return train, ev


def parse_run_config(doc: Any, base_dir: Path | str = ".") -> RunConfig:
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    model = dict(doc["model"])
    base = Path(base_dir)
    cfg = RunConfig(model=None, train=TrainConfig(**doc.get("train", {})), data=doc["data"],
                    output=Path(doc["output"]), base_dir=base)
    if not cfg.output.is_absolute():
        cfg.output = base / cfg.output
    if "in_channels" not in model:
        try:
            model["in_channels"] = cfg.image_shape()[0]
        except FileNotFoundError as exc:
            raise ConfigError(f"data file not found: {exc.filename}") from None
    cfg.model = ModelSpec.from_dict(model)
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_run_config(doc, path.parent)
