"""Command-line entry point: ``nst {train,mmd,gradcheck,eval}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import IdxError, load_idx
from .experiment import ConfigError, error_rate, load_config, load_datasets, run_experiment
from .mmd import KernelSpec, mmd_sq
from .net import CheckpointError, load_checkpoint


def read_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric entry") from None
            if len(rows[-1]) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: ragged row ({len(rows[-1])} columns, expected {len(rows[0])})")
    if not rows:
        raise ValueError(f"{path}: no rows")
    return np.array(rows)


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        teacher = load_checkpoint(args.teacher_checkpoint) if args.teacher_checkpoint else None
        records = run_experiment(cfg, args.output_dir, teacher, timing=args.timing)
    except (ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    for r in records:
        print(f"{r.method}\tseed={r.seed}\tfinal_test_error={r.final_test_error:.4f}" if r.epochs
              else f"{r.method}\tseed={r.seed}")
    return 0


def kernel_from_args(args) -> KernelSpec:
    if args.kernel == "linear":
        return KernelSpec.linear()
    if args.kernel == "poly":
        return KernelSpec.poly(args.d, args.c)
    return KernelSpec.gaussian(args.sigma_sq)


def cmd_mmd(args) -> int:
    try:
        x = read_matrix_csv(args.x)
        y = read_matrix_csv(args.y)
        if x.shape[1] != y.shape[1]:
            raise ValueError(f"column mismatch: {args.x} has {x.shape[1]}, {args.y} has {y.shape[1]}")
        res = mmd_sq(kernel_from_args(args), x, y)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"mmd_sq={res.value!r}")
    if res.sigma_sq_used is not None:
        print(f"sigma_sq_used={res.sigma_sq_used!r}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seed, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    print("gradcheck: " + ("all suites passed" if ok else "FAILED"))
    return 0 if ok else 1


def cmd_eval(args) -> int:
    try:
        net = load_checkpoint(args.checkpoint)
        if args.dataset.endswith((".ini", ".cfg", ".conf")):
            cfg = load_config(args.dataset)
            train, test = load_datasets(cfg.data, args.seed)
            ds = train if args.split == "train" else test
        else:
            images, sep, labels = args.dataset.partition(":")
            if not sep:
                raise ConfigError("dataset must be a config file or IMAGES.idx:LABELS.idx")
            ds = load_idx(images, labels, net.num_classes)
            mean = ds.images.mean(axis=(0, 2, 3), keepdims=True)
            std = ds.images.std(axis=(0, 2, 3), keepdims=True)
            ds.images = (ds.images - mean) / np.where(std == 0, 1.0, std)
        if ds.images.shape[1:] != net.in_shape:
            raise CheckpointError(f"checkpoint expects input {net.in_shape}, dataset has {ds.images.shape[1:]}")
        if ds.num_classes != net.num_classes:
            raise CheckpointError(f"checkpoint has {net.num_classes} outputs, dataset has {ds.num_classes} classes")
    except (OSError, ConfigError, CheckpointError, IdxError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"top1_error={error_rate(net, ds)!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nst", description="Neuron selectivity transfer toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a teacher and distill students per the config")
    t.add_argument("config")
    t.add_argument("--output-dir", default=None, help="override [output] dir")
    t.add_argument("--teacher-checkpoint", default=None, help="reuse a trained teacher instead of training one")
    t.add_argument("--timing", action="store_true", help="fill the wall_ms column of summary.csv")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mmd", help="squared MMD between the rows of two CSV matrices")
    m.add_argument("x")
    m.add_argument("y")
    m.add_argument("--kernel", choices=("linear", "poly", "gaussian"), default="poly")
    m.add_argument("--d", type=int, default=2, help="polynomial degree")
    m.add_argument("--c", type=float, default=0.0, help="polynomial offset")
    m.add_argument("--sigma-sq", type=float, default=None,
                   help="fixed Gaussian bandwidth (default: mean pairwise squared distance)")
    m.set_defaults(func=cmd_mmd)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every analytic gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", default=None, choices=gradcheck.all_names(), help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="top-1 error of a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="experiment config (.ini) or IMAGES.idx:LABELS.idx")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--seed", type=int, default=0, help="run seed used to generate synthetic data")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
