"""Latency benchmarks and configuration sweeps."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig
from .encoding import Dataset
from .errors import ConfigError, EmptyDataset
from .inference import InferenceKernel, latency_stats, op_count
from .learning import TrainingParams, train_full
from .network import NetworkState, build_network
from .precision import FP32, PrecisionMode


@dataclass
class BenchRow:
    config_id: str
    precision: str
    accuracy: float
    mean_us: float
    median_us: float
    p95_us: float
    wall_s: float
    saturations: int
    ops_per_image: int
    relative_latency: float = 1.0


CSV_COLUMNS = (
    "config_id,precision,accuracy,mean_us,median_us,p95_us,wall_s,saturations,ops_per_image,relative_latency"
)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def csv(self) -> str:
        out = [CSV_COLUMNS]
        for r in self.rows:
            acc = "" if r.accuracy != r.accuracy else f"{r.accuracy:.6f}"
            out.append(
                f"{r.config_id},{r.precision},{acc},{r.mean_us:.1f},{r.median_us:.1f},{r.p95_us:.1f},"
                f"{r.wall_s:.3f},{r.saturations},{r.ops_per_image},{r.relative_latency:.4f}"
            )
        return "\n".join(out) + "\n"

    def table(self) -> str:
        head = (f"{'config':<22}{'precision':<14}{'accuracy':>9}{'mean us':>11}{'median us':>11}"
                f"{'p95 us':>11}{'ops/image':>12}{'rel':>7}{'sat':>8}")
        lines = [head, "-" * len(head)]
        for r in self.rows:
            acc = "-" if r.accuracy != r.accuracy else f"{r.accuracy:.4f}"
            lines.append(
                f"{r.config_id:<22}{r.precision:<14}{acc:>9}{r.mean_us:>11.1f}{r.median_us:>11.1f}"
                f"{r.p95_us:>11.1f}{r.ops_per_image:>12d}{r.relative_latency:>7.3f}{r.saturations:>8d}"
            )
        return "\n".join(lines)


def bench_latency(net: NetworkState, dataset: Dataset, repeats: int = 1, warmup: int = 0,
                  precision: PrecisionMode | None = None, parallel_factor: int | None = None) -> dict:
    """Time ``repeats`` passes of predict over the dataset.

    ``warmup`` untimed predict calls (cycling through the dataset) run first.
    The result holds the order statistics plus the raw samples in microseconds.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    kernel = InferenceKernel(net, precision, parallel_factor)
    images = dataset.images
    for i in range(warmup):
        kernel.predict(images[i % len(images)])
    clock = time.perf_counter
    lat = np.empty(repeats * len(images))
    k = 0
    for _ in range(repeats):
        for img in images:
            t0 = clock()
            kernel.predict(img)
            lat[k] = (clock() - t0) * 1e6
            k += 1
    stats = latency_stats(lat)
    stats["samples_us"] = lat
    return stats


# ---------------------------------------------------------------- sweeps

_AXES = ("hcu", "mcu", "nact", "precision")


def parse_sweep(text: str) -> list[tuple[str, list[str]]]:
    """``hcu=30,20,10;mcu=400,200;nact=320/80,160/40;precision=fp32,fp16``."""
    axes = []
    for part in (p.strip() for p in text.split(";")):
        if not part:
            continue
        name, sep, values = part.partition("=")
        name = name.strip().lower()
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not sep or name not in _AXES:
            raise ConfigError([f"bad sweep axis {part!r}; axes are {', '.join(_AXES)}"])
        if not vals:
            raise ConfigError([f"sweep axis {name} lists no values"])
        axes.append((name, vals))
    if not axes:
        raise ConfigError(["empty sweep spec"])
    return axes


def apply_axis(config: NetworkConfig, axis: str, value: str) -> tuple[NetworkConfig, PrecisionMode | None, str]:
    """Config (and precision override) for one sweep point plus its row id."""
    if axis == "hcu":
        return config.replace(n_hidden_hcu=int(value)), None, f"hcu={value}"
    if axis == "mcu":
        return config.replace(hidden_mcu_per_hcu=int(value)), None, f"mcu={value}"
    if axis == "nact":
        act, _, sil = value.partition("/")
        sil = int(sil) if sil else config.n_sil
        return config.replace(n_act=int(act), n_sil=sil, n_replace=min(config.n_replace, sil)), None, f"nact={act}/{sil}"
    if axis == "precision":
        return config, PrecisionMode.parse(value), f"precision={value}"
    raise ConfigError([f"unknown sweep axis {axis!r}"])


def synthetic_net(config: NetworkConfig, scale: float = 0.5) -> NetworkState:
    """A fresh network with random weights, for timing without training."""
    net = build_network(config)
    rng = np.random.default_rng([config.seed, 7])
    net.input_hidden.weights[...] = rng.normal(0.0, scale, net.input_hidden.weights.shape)
    net.hidden_output.weights[...] = rng.normal(0.0, scale, net.hidden_output.weights.shape)
    return net


def synthetic_images(config: NetworkConfig, n: int, seed: int = 0) -> Dataset:
    """Uniform random images shaped for ``config``; labels are all zero."""
    side = int(round(config.n_input_hcu ** 0.5))
    h, w = (side, side) if side * side == config.n_input_hcu else (1, config.n_input_hcu)
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, h, w)), np.zeros(n, dtype=np.int64), w, h, config.n_classes, "synthetic")


def measure(config_id: str, net: NetworkState, test: Dataset, precision: PrecisionMode,
            repeats: int = 1, warmup: int = 0, parallel_factor: int | None = None,
            with_accuracy: bool = True) -> BenchRow:
    kernel = InferenceKernel(net, precision, parallel_factor)
    t0 = time.perf_counter()
    stats = bench_latency(net, test, repeats, warmup, precision, parallel_factor)
    acc = float("nan")
    if with_accuracy:
        preds = np.array([kernel.predict(img).predicted_class for img in test.images])
        acc = float(np.mean(preds == test.labels))
    return BenchRow(config_id, str(precision), acc, stats["mean"], stats["median"], stats["p95"],
                    time.perf_counter() - t0, kernel.saturations, op_count(net.config))


def sweep(base: NetworkConfig, axes, test: Dataset | None = None, train: Dataset | None = None,
          precision: PrecisionMode = FP32, repeats: int = 1, warmup: int = 0,
          n_synthetic: int = 20, parallel_factor: int | None = None, base_net: NetworkState | None = None) -> BenchReport:
    """Vary one axis at a time from ``base``; rows follow the order given.

    With a training set every configuration is trained first. Without one the
    networks carry random weights and the rows report latency only.
    Relative latency is normalized to the base configuration.
    """
    if isinstance(axes, str):
        axes = parse_sweep(axes)
    if not axes:
        raise ConfigError(["empty sweep spec"])
    trained = train is not None and len(train) > 0
    cache: dict = {}

    def network(cfg):
        key = repr(cfg)
        if key not in cache:
            if base_net is not None and cfg == base:
                cache[key] = base_net
            elif trained:
                net = build_network(cfg)
                train_full(net, train, TrainingParams.from_config(cfg, len(train)))
                cache[key] = net
            else:
                cache[key] = synthetic_net(cfg)
        return cache[key]

    def data(cfg):
        if test is not None and test.n_pixels == cfg.n_input_hcu:
            return test, trained or base_net is not None
        return synthetic_images(cfg, n_synthetic, cfg.seed), False

    rows = []
    base_mean = None
    for axis, values in axes:
        for value in values:
            cfg, mode, cid = apply_axis(base, axis, value)
            mode = mode or precision
            ds, with_acc = data(cfg)
            row = measure(cid, network(cfg), ds, mode, repeats, warmup, parallel_factor,
                          with_accuracy=with_acc and (trained or cfg == base))
            if cfg == base and mode == precision and base_mean is None:
                base_mean = row.mean_us
            rows.append(row)
    if base_mean is None:
        ds, _ = data(base)
        base_mean = measure("base", network(base), ds, precision, repeats, warmup,
                            parallel_factor, with_accuracy=False).mean_us
    for r in rows:
        r.relative_latency = r.mean_us / base_mean if base_mean > 0 else float("nan")
    return BenchReport(rows)
