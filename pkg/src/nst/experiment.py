"""Experiment harness: INI configs, teacher/student training, and CSV metrics.

See README.md for the config grammar. A run trains a CE-only teacher per
seed, freezes it, then trains a no-transfer baseline student plus one
student per configured transfer method. Every student of a seed starts from
the same initialization and sees the same mini-batch order.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses as L
from .data import AugmentSpec, Dataset, augment, fit_normalizer, load_idx, normalize, train_test_blobs
from .mmd import KernelSpec
from .net import SGD, KINDS, LayerSpec, Network, SgdConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

BASELINE = "baseline"
SUMMARY_COLUMNS = ("method", "seed", "final_test_error", "best_test_error", "epochs", "wall_ms")
RUN_COLUMNS = ("epoch", "lr", "train_loss", "test_error", "config_hash")


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending ``section.key``."""


@dataclass
class DataConfig:
    kind: str = "blobs"
    num_classes: int = 10
    dim: int = 32
    train_per_class: int = 40
    test_per_class: int = 100
    spread: float = 1.0
    input_shape: Tuple[int, int, int] = (2, 4, 4)
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    augment_pad: int = 0
    augment_crop: int = 0
    hflip_prob: float = 0.0


@dataclass
class LossConfig:
    nst_linear_weight: float = L.DEFAULT_NST_WEIGHT["linear"]
    nst_poly_weight: float = L.DEFAULT_NST_WEIGHT["poly"]
    nst_gaussian_weight: float = L.DEFAULT_NST_WEIGHT["gaussian"]
    poly_degree: int = 2
    poly_offset: float = 0.0
    kd_tau: float = L.DEFAULT_KD_TAU
    kd_weight: float = L.DEFAULT_KD_WEIGHT
    fitnet_weight: float = L.DEFAULT_FITNET_WEIGHT
    at_weight: float = L.DEFAULT_AT_WEIGHT
    at_mapping: str = L.SQ_SUM


@dataclass
class ExperimentConfig:
    data: DataConfig
    teacher: List[LayerSpec]
    student: List[LayerSpec]
    methods: List[str]
    sgd: SgdConfig
    losses: LossConfig = field(default_factory=LossConfig)
    epochs: int = 60
    teacher_epochs: int = 60
    batch_size: int = 128
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"

    @property
    def teacher_tap(self) -> Optional[int]:
        return next((i for i, layer in enumerate(self.teacher) if layer.tap), None)

    @property
    def student_tap(self) -> Optional[int]:
        return next((i for i, layer in enumerate(self.student) if layer.tap), None)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    method: str
    seed: int
    train_loss: List[float]
    test_error: List[float]
    lrs: List[float]
    wall_ms: float
    config_hash: str

    @property
    def final_test_error(self) -> float:
        return self.test_error[-1]

    @property
    def best_test_error(self) -> float:
        return min(self.test_error)

    @property
    def epochs(self) -> int:
        return len(self.test_error)


def parse_layers(text: str, where: str) -> List[LayerSpec]:
    """``conv:32, relu:tap, maxpool, flatten, dense:10`` -> layer specs."""
    layers = []
    for raw in text.split(","):
        tokens = [t.strip() for t in raw.strip().split(":") if t.strip()]
        if not tokens:
            continue
        kind, rest = tokens[0].lower(), tokens[1:]
        if kind not in KINDS:
            raise ConfigError(f"{where}: unknown layer kind {kind!r} (expected one of {', '.join(KINDS)})")
        tap = "tap" in rest
        nums = [t for t in rest if t != "tap"]
        try:
            size = int(nums[0]) if nums else 0
            layers.append(LayerSpec(kind, size, tap))
        except ValueError as e:
            raise ConfigError(f"{where}: bad layer {raw.strip()!r}: {e}") from None
    if not layers:
        raise ConfigError(f"{where}: no layers given")
    return layers


def format_layers(layers: Sequence[LayerSpec]) -> str:
    parts = []
    for layer in layers:
        s = layer.kind + (f":{layer.size}" if layer.size else "")
        parts.append(s + (":tap" if layer.tap else ""))
    return ", ".join(parts)


def _ints(text: str) -> List[int]:
    return [int(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _fill(obj, section: configparser.SectionProxy, name: str) -> None:
    for key, value in section.items():
        if not hasattr(obj, key):
            raise ConfigError(f"{name}.{key}: unknown key")
        current = getattr(obj, key)
        try:
            if isinstance(current, tuple):
                parsed = tuple(_ints(value))
            elif isinstance(current, bool):
                parsed = section.getboolean(key)
            elif isinstance(current, int):
                parsed = int(value)
            elif isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value.strip()
        except ValueError:
            raise ConfigError(f"{name}.{key}: cannot parse {value!r} as {type(current).__name__}") from None
        setattr(obj, key, parsed)


def parse_method(name: str, lc: LossConfig) -> L.TransferLoss:
    """Build a transfer loss from a method name such as ``nst-poly`` or ``kd+nst-poly``."""
    parts = [p.strip().lower() for p in name.split("+")]
    built = []
    for p in parts:
        if p == "kd":
            built.append(L.KD(lc.kd_tau, lc.kd_weight))
        elif p == "fitnet":
            built.append(L.FitNet(lc.fitnet_weight))
        elif p in ("at", "at-sqsum", "at-abssum"):
            mapping = lc.at_mapping if p == "at" else p.split("-")[1]
            built.append(L.AT(mapping, lc.at_weight))
        elif p == "nst-linear":
            built.append(L.NST(KernelSpec.linear(), lc.nst_linear_weight))
        elif p == "nst-poly":
            built.append(L.NST(KernelSpec.poly(lc.poly_degree, lc.poly_offset), lc.nst_poly_weight))
        elif p == "nst-gaussian":
            built.append(L.NST(KernelSpec.gaussian(), lc.nst_gaussian_weight))
        else:
            raise ConfigError(f"methods.list: unknown method {p!r}")
    return built[0] if len(built) == 1 else L.Combined(tuple(built))


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    known = {"data", "teacher", "student", "methods", "train", "losses", "output"}
    for s in cp.sections():
        if s not in known:
            raise ConfigError(f"{s}: unknown section")

    data = DataConfig()
    if cp.has_section("data"):
        _fill(data, cp["data"], "data")
    if data.kind not in ("blobs", "idx"):
        raise ConfigError(f"data.kind: expected blobs or idx, got {data.kind!r}")
    if len(data.input_shape) != 3:
        raise ConfigError(f"data.input_shape: expected C,H,W, got {data.input_shape}")

    nets = {}
    for which in ("teacher", "student"):
        if not cp.has_option(which, "layers"):
            raise ConfigError(f"{which}.layers: missing")
        nets[which] = parse_layers(cp[which]["layers"], f"{which}.layers")

    losses = LossConfig()
    if cp.has_section("losses"):
        _fill(losses, cp["losses"], "losses")

    methods = []
    if cp.has_option("methods", "list"):
        methods = [m.strip().lower() for m in cp["methods"]["list"].split(",") if m.strip()]
    for m in methods:
        parse_method(m, losses)

    tr = cp["train"] if cp.has_section("train") else {}
    sgd_fields = {}
    try:
        for key, conv in (("lr", float), ("momentum", float), ("weight_decay", float), ("lr_decay", float)):
            if key in tr:
                sgd_fields[key] = conv(tr[key])
        if "milestones" in tr:
            sgd_fields["milestones"] = tuple(_ints(tr["milestones"]))
        sgd = SgdConfig(**sgd_fields)
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    for key in tr:
        if key not in ("lr", "momentum", "weight_decay", "lr_decay", "milestones", "epochs", "teacher_epochs",
                       "batch_size", "seeds"):
            raise ConfigError(f"train.{key}: unknown key")

    try:
        epochs = int(tr.get("epochs", 60))
        teacher_epochs = int(tr.get("teacher_epochs", epochs))
        batch_size = int(tr.get("batch_size", 128))
        seeds = _ints(tr.get("seeds", "0"))
    except ValueError as e:
        raise ConfigError(f"train: {e}") from None
    if not seeds:
        raise ConfigError("train.seeds: at least one seed is required")
    if batch_size < 1:
        raise ConfigError(f"train.batch_size: must be >= 1, got {batch_size}")
    if epochs < 1 or teacher_epochs < 0:
        raise ConfigError("train.epochs: must be >= 1")

    out_dir = cp["output"].get("dir", "runs") if cp.has_section("output") else "runs"
    cfg = ExperimentConfig(data, nets["teacher"], nets["student"], methods, sgd, losses, epochs, teacher_epochs,
                           batch_size, seeds, out_dir)
    _validate_networks(cfg)
    return cfg


def _validate_networks(cfg: ExperimentConfig) -> None:
    for which, layers in (("teacher", cfg.teacher), ("student", cfg.student)):
        try:
            Network(layers, cfg.data.input_shape)
        except ValueError as e:
            raise ConfigError(f"{which}.layers: {e}") from None
    feature_methods = [m for m in cfg.methods if L.needs_features(parse_method(m, cfg.losses))]
    if feature_methods and (cfg.teacher_tap is None or cfg.student_tap is None):
        raise ConfigError(f"teacher.layers/student.layers: methods {feature_methods} need a ':tap' layer in both nets")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def load_datasets(dc: DataConfig, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Train/test splits, normalized with train-split channel statistics."""
    if dc.kind == "blobs":
        train, test = train_test_blobs(dc.num_classes, dc.train_per_class, dc.test_per_class, dc.dim, dc.spread,
                                       dc.seed + seed)
        train, test = train.as_images(dc.input_shape), test.as_images(dc.input_shape)
    else:
        train = load_idx(dc.train_images, dc.train_labels, dc.num_classes, "train")
        test = load_idx(dc.test_images, dc.test_labels, dc.num_classes, "test")
    mean, std = fit_normalizer(train.images)
    return normalize(train, mean, std), normalize(test, mean, std)


def error_rate(net: Network, ds: Dataset) -> float:
    if len(ds) == 0:
        return 0.0
    return float(np.mean(net.predict(ds.images) != ds.labels))


def train_network(net: Network, train: Dataset, test: Dataset, sgd: SgdConfig, epochs: int, batch_size: int,
                  seed: int, loss: Optional[L.TransferLoss] = None, teacher: Optional[Network] = None,
                  aug: Optional[AugmentSpec] = None, method: str = BASELINE, config_hash: str = "") -> RunRecord:
    """Train ``net`` in place with CE plus the optional transfer loss against a frozen teacher."""
    rng = np.random.default_rng([seed, 7])
    adapter = None
    params = net.param_arrays()
    if L.needs_adapter(loss):
        c_t = teacher.shapes[teacher.tap_index + 1][0]
        c_s = net.shapes[net.tap_index + 1][0]
        adapter = L.Adapter.init(c_t, c_s, seed=seed)
        params = params + [adapter.weight, adapter.bias]
    opt = SGD(sgd)
    n = len(train)
    start = time.perf_counter()
    record = RunRecord(method, seed, [], [], [], 0.0, config_hash)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            x = train.images[idx]
            if aug is not None:
                x = augment(x, aug, rng)
            out = net.forward(x)
            transfers = []
            if loss is not None:
                t_out = teacher.forward(x)
                transfers = L.evaluate_transfer(loss, t_out.logits, out.logits, t_out.tap, out.tap, adapter)
            val = L.total_loss(out.logits, train.labels[idx], transfers)
            grads = net.backward(out.caches, val.grad_logits, val.grad_feature)
            flat = [g[k] for g in grads for k in ("w", "b") if k in g]
            if adapter is not None:
                ga = val.grad_adapter
                flat += [ga.weight, ga.bias] if ga is not None else [np.zeros_like(adapter.weight),
                                                                     np.zeros_like(adapter.bias)]
            opt.step(params, flat, epoch)
            total += val.total * len(idx)
            seen += len(idx)
        if not all(np.isfinite(p).all() for p in params):
            raise FloatingPointError(f"{method} seed {seed}: parameters diverged at epoch {epoch}")
        record.train_loss.append(total / seen)
        record.test_error.append(error_rate(net, test))
        record.lrs.append(sgd.lr_at(epoch))
    record.wall_ms = (time.perf_counter() - start) * 1e3
    return record


def run_seed(cfg: ExperimentConfig, seed: int, teacher: Optional[Network] = None,
             out_dir: Optional[Path] = None) -> Tuple[Network, List[RunRecord]]:
    train, test = load_datasets(cfg.data, seed)
    h = cfg.config_hash()
    dc = cfg.data
    aug = AugmentSpec(dc.augment_pad, dc.augment_crop, dc.hflip_prob) if dc.augment_crop else None
    records = []
    if teacher is None:
        teacher = Network(cfg.teacher, dc.input_shape, seed=1000 + seed)
        rec = train_network(teacher, train, test, cfg.sgd, cfg.teacher_epochs, cfg.batch_size, seed, aug=aug,
                            method="teacher", config_hash=h)
        records.append(rec)
        log.info("seed %d teacher: test error %.4f", seed, rec.final_test_error if rec.epochs else float("nan"))
    if out_dir is not None:
        save_checkpoint(teacher, out_dir / f"teacher_seed{seed}.ckpt")
    for method in [BASELINE] + list(cfg.methods):
        loss = None if method == BASELINE else parse_method(method, cfg.losses)
        student = Network(cfg.student, dc.input_shape, seed=2000 + seed)
        rec = train_network(student, train, test, cfg.sgd, cfg.epochs, cfg.batch_size, seed, loss, teacher, aug,
                            method, h)
        records.append(rec)
        log.info("seed %d %s: test error %.4f", seed, method, rec.final_test_error)
        if out_dir is not None:
            save_checkpoint(student, out_dir / f"student_{method}_seed{seed}.ckpt")
    return teacher, records


def run_csv(rec: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for e, (lr, tl, te) in enumerate(zip(rec.lrs, rec.train_loss, rec.test_error)):
        w.writerow([e, repr(lr), repr(tl), repr(te), rec.config_hash])
    return buf.getvalue()


def summary_csv(records: Sequence[RunRecord], timing: bool = False) -> str:
    """Summary table; ``wall_ms`` is left blank unless ``timing`` so reruns are byte-identical."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in records:
        w.writerow([r.method, r.seed, repr(r.final_test_error), repr(r.best_test_error), r.epochs,
                    f"{r.wall_ms:.0f}" if timing else ""])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, teacher: Optional[Network] = None,
                   timing: bool = False) -> List[RunRecord]:
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from None
    if teacher is not None and teacher.in_shape != tuple(cfg.data.input_shape):
        raise ConfigError(f"teacher checkpoint input {teacher.in_shape} != data.input_shape {cfg.data.input_shape}")
    records = []
    for seed in cfg.seeds:
        _, recs = run_seed(cfg, seed, teacher, out)
        records.extend(recs)
    for r in records:
        (out / f"run_{r.method}_seed{r.seed}.csv").write_text(run_csv(r))
    (out / "summary.csv").write_text(summary_csv(records, timing))
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "seed", "wall_ms"))
        for r in records:
            w.writerow((r.method, r.seed, f"{r.wall_ms:.0f}"))
    return records
