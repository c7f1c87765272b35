"""Command-line entry point.

Exit codes: 0 success, 1 selftest failure, 2 configuration or usage error,
3 numerical abort during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import (cosine_similarity_matrix, dump_kernels, extract_kernels, heatmap_emit, mean_offdiag,
                       min_pairwise_distance, project_weights_2d, write_projection_csv)
from .complexity import report
from .config import RunConfig, load_run_config
from .exceptions import ConfigError, NumericalError, UsageError
from .formats import FormatError, read_checkpoint
from .model import build_model
from .selftest import format_results, run_selftest
from .training import evaluate, train

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
N_HEATMAPS = 5


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if getattr(args, "out", None):
        cfg.output = Path(args.out)
    return cfg


def _restore(cfg: RunConfig, checkpoint: str):
    model = build_model(cfg.model, seed=cfg.train.seed)
    try:
        state = read_checkpoint(checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {checkpoint}") from None
    model.load_state_dict(state)
    return model


def cmd_train(args) -> int:
    cfg = _load(args)
    train_ds, eval_ds = cfg.load_data()
    model = build_model(cfg.model, seed=cfg.train.seed)
    history = train(model, train_ds, cfg.train, eval_ds, out_dir=cfg.output)
    final = history[-1]["eval_top1"] if history else evaluate(model, eval_ds)
    print(f"eval top1 {final:.4f}; wrote {cfg.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    _, eval_ds = cfg.load_data()
    model = _restore(cfg, args.checkpoint)
    print(f"eval top1 {evaluate(model, eval_ds):.4f} on {len(eval_ds)} samples")
    return EXIT_OK


def cmd_complexity(args) -> int:
    cfg = _load(args)
    model = build_model(cfg.model, seed=cfg.train.seed)
    rep = report(model, cfg.image_shape()[1:])
    cfg.output.mkdir(parents=True, exist_ok=True)
    path = cfg.output / "complexity.csv"
    with open(path, "w", newline="") as fh:
        rep.write_csv(fh, args.flops_convention)
    scale = 2 if args.flops_convention == "2macs" else 1
    unit = "flops" if scale == 2 else "macs"
    for branch, (params, macs) in rep.totals.items():
        print(f"{branch:7s} params {params:10d}  {unit} {macs * scale:12d}")
    print(f"kernel params {rep.kernel_params()}; wrote {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load(args)
    if not args.layer:
        raise UsageError("analyze needs --layer, e.g. stage1.block0")
    _, eval_ds = cfg.load_data()
    model = _restore(cfg, args.checkpoint)
    n = min(args.samples, len(eval_ds))
    subset = eval_ds.subset(np.arange(n))
    kernels = extract_kernels(model, subset.images, args.layer, subset.labels)
    out = cfg.output
    dump_kernels(kernels, out, sidecar=None)
    sims = [cosine_similarity_matrix(k, args.layer, f"{k.batch_id:04d}") for k in kernels]
    for s in sims[:N_HEATMAPS]:
        heatmap_emit(s, out / f"similarity_{s.sample}.pgm")
    if n >= 2:
        points = project_weights_2d(kernels)
        write_projection_csv(out / "projection.csv", points, [k.batch_id for k in kernels])
    summary = {
        "layer": args.layer,
        "samples": n,
        "mean_abs_offdiag_similarity": float(np.mean([mean_offdiag(s) for s in sims])) if sims else None,
        "min_pairwise_distance": min_pairwise_distance(kernels) if n >= 2 else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{n} kernels from {args.layer}; mean |offdiag| similarity "
          f"{summary['mean_abs_offdiag_similarity']:.4f}; wrote {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest()
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weightnet", description="Weight-generating convolutions at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run config (JSON)")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--out", help="override the output directory")
        sp.set_defaults(func=fn)
        return sp

    with_config("train", cmd_train, "train a model and write metrics + checkpoint")
    ev = with_config("eval", cmd_eval, "evaluate a checkpoint on the eval split")
    ev.add_argument("--checkpoint", required=True)
    cx = with_config("complexity", cmd_complexity, "write per-layer parameter/MAC report")
    cx.add_argument("--flops-convention", choices=("macs", "2macs"), default="macs")
    an = with_config("analyze", cmd_analyze, "dump per-sample kernels, similarity maps and a 2-d projection")
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--layer", required=True, help="dynamic block name, e.g. stage1.block0")
    an.add_argument("--samples", type=int, default=20, help="number of eval samples (default 20)")
    st = sub.add_parser("selftest", help="run equivalence and gradient checks in 64-bit mode")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
