"""``bcpnn`` command line: train, eval, sweep, export, inspect, bench.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or input
error. Errors are reported as one line on stderr: ``error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchReport, BenchRow, bench_latency, sweep
from .config import NetworkConfig, load_config, mnist_config
from .encoding import Dataset, load_idx, load_raw_gray
from .errors import BcpnnError, ConfigError, DatasetError, DatasetNotFound, DomainError, ParamFileError, ShapeError
from .inference import latency_stats, make_report, op_count
from .learning import TrainingParams, train_full
from .model_io import export_params, import_params, inspect
from .network import build_network
from .pipeline import INFER, PipelineSpec, build_pipeline, counters_csv, counters_report, run_stream
from .precision import PrecisionMode

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(BcpnnError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _precision(args, fallback: PrecisionMode | None = None) -> PrecisionMode | None:
    if args.precision is None:
        if fallback is not None and args.strictness:
            return PrecisionMode.parse(fallback.name, args.strictness)
        return fallback
    return PrecisionMode.parse(args.precision, args.strictness or "strict")


def _config(args) -> NetworkConfig:
    cfg = load_config(args.config) if args.config else mnist_config()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs_unsup", None) is not None:
        changes["epochs_unsup"] = args.epochs_unsup
    if getattr(args, "epochs_sup", None) is not None:
        changes["epochs_sup"] = args.epochs_sup
    return cfg.replace(**changes) if changes else cfg


def _is_idx(path) -> bool:
    p = Path(path)
    if not p.is_file():
        raise DatasetNotFound(f"dataset not found: {p}")
    with p.open("rb") as fh:
        return fh.read(4) == b"\x00\x00\x08\x03"


def _load(images, labels, args, n_classes: int, split: str, limit: int | None) -> Dataset:
    if images is None or labels is None:
        raise UsageError(f"{split} set needs both images and labels")
    if _is_idx(images):
        ds = load_idx(images, labels, n_classes, split)
    else:
        if not (args.width and args.height):
            raise UsageError("raw grayscale images need --width and --height")
        ds = load_raw_gray(images, labels, args.width, args.height, n_classes, split)
    return ds.subset(limit) if limit else ds


def _test_set(args, n_classes: int) -> Dataset | None:
    if args.test_images or args.test_labels:
        return _load(args.test_images, args.test_labels, args, n_classes, "test", args.test_limit)
    return None


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    train = _load(args.images, args.labels, args, cfg.n_classes, "train", args.limit)
    if train.n_pixels != cfg.n_input_hcu:
        raise ShapeError(f"images have {train.n_pixels} pixels, config expects {cfg.n_input_hcu}")
    test = _test_set(args, cfg.n_classes)
    if args.model is None:
        raise UsageError("train needs --model for the output parameter file")
    mode = _precision(args, cfg.precision)
    net = build_network(cfg)
    params = TrainingParams.from_config(cfg, len(train), shuffle=args.shuffle)

    def progress(m):
        acc = "" if m.test_accuracy != m.test_accuracy else f" acc={m.test_accuracy:.4f}"
        print(f"{m.phase} epoch {m.epoch}: {m.wall_ms / 1e3:.1f}s{acc}", file=sys.stderr, flush=True)

    res = train_full(net, train, params, test=test, on_metrics=progress)
    export_params(net, mode, args.model)
    header = (f"# alpha={params.alpha:.9g} rewire_period={params.rewire_period} "
              f"n_replace={params.n_replace} precision={mode}\n")
    _write(args.csv, header + res.csv())
    return EXIT_OK


def _eval_pipeline(net, test, mode, args):
    spec = PipelineSpec.default(INFER, mode, args.channel_capacity, args.parallel_factor)
    pipe = build_pipeline(net, INFER, spec, precision=mode, hard_wta=args.hard_wta)
    res = run_stream(pipe, test.images)
    preds = np.array([o.predicted_class for o in res.outputs], dtype=np.int64)
    return pipe, res, make_report(pipe.kernel, test.labels, preds, res.latencies_us)


def cmd_eval(args) -> int:
    if args.model is None:
        raise UsageError("eval needs --model")
    net = import_params(args.model)
    mode = _precision(args, net.precision)
    test = _test_set(args, net.config.n_classes)
    if test is None:
        test = _load(args.images, args.labels, args, net.config.n_classes, "test", args.test_limit)
    pipe, res, report = _eval_pipeline(net, test, mode, args)
    st = report.latency_stats()
    row = BenchRow(Path(args.model).stem, report.precision, report.accuracy, st["mean"], st["median"],
                   st["p95"], res.wall_time, report.saturations, op_count(net.config))
    print(report.table())
    print()
    print(counters_report(res.counters))
    print()
    sys.stdout.write(BenchReport([row]).csv())
    if args.csv:
        _write(args.csv, report.csv())
    if args.counters_csv:
        _write(args.counters_csv, counters_csv(res.counters))
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.sweep or not args.sweep.strip():
        raise UsageError("sweep needs a non-empty --sweep spec, e.g. hcu=30,20,10")
    cfg = _config(args)
    train = None
    if args.images or args.labels:
        train = _load(args.images, args.labels, args, cfg.n_classes, "train", args.limit)
    test = _test_set(args, cfg.n_classes)
    mode = _precision(args, cfg.precision)
    report = sweep(cfg, args.sweep, test=test, train=train, precision=mode, repeats=args.repeats,
                   warmup=args.warmup, n_synthetic=args.n_synthetic, parallel_factor=args.parallel_factor)
    print(report.table())
    print()
    sys.stdout.write(report.csv())
    if args.csv:
        _write(args.csv, report.csv())
    return EXIT_OK


def cmd_export(args) -> int:
    if args.out is None:
        raise UsageError("export needs --out")
    if args.model:
        net = import_params(args.model)
    else:
        net = build_network(_config(args))
    mode = _precision(args, net.precision or net.config.precision)
    export_params(net, mode, args.out)
    info = inspect(args.out)
    print(f"path={args.out} precision={info['precision']} bytes={info['file_bytes']} crc={info['crc']}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = args.model or args.path
    if path is None:
        raise UsageError("inspect needs --model or a path")
    if not Path(path).is_file():
        raise ParamFileError(f"model file not found: {path}")
    for k, v in inspect(path).items():
        print(f"{k} = {v}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.model is None:
        raise UsageError("bench needs --model")
    net = import_params(args.model)
    mode = _precision(args, net.precision)
    test = _test_set(args, net.config.n_classes)
    if test is None:
        test = _load(args.images, args.labels, args, net.config.n_classes, "test", args.test_limit)
    stats = bench_latency(net, test, args.repeats, args.warmup, mode, args.parallel_factor)
    lat = stats.pop("samples_us")
    row = BenchRow(Path(args.model).stem, str(mode), float("nan"), stats["mean"], stats["median"],
                   stats["p95"], float(lat.sum() / 1e6), 0, op_count(net.config))
    report = BenchReport([row])
    print(report.table())
    print()
    sys.stdout.write(report.csv())
    if args.csv:
        lines = ["call,latency_us"] + [f"{i},{v:.1f}" for i, v in enumerate(lat)]
        _write(args.csv, "\n".join(lines) + "\n")
    s = latency_stats(lat)
    print(f"# n={s['n']} min_us={s['min']:.1f} max_us={s['max']:.1f}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--images")
    common.add_argument("--labels")
    common.add_argument("--test-images")
    common.add_argument("--test-labels")
    common.add_argument("--model")
    common.add_argument("--precision", choices=["fp32", "fp16", "mixed"])
    common.add_argument("--strictness", choices=["strict", "storage"])
    common.add_argument("--seed", type=int)
    common.add_argument("--parallel-factor", type=int)
    common.add_argument("--channel-capacity", type=int, default=64)
    common.add_argument("--repeats", type=int, default=1)
    common.add_argument("--warmup", type=int, default=0)
    common.add_argument("--csv")
    common.add_argument("--width", type=int, help="raw grayscale image width")
    common.add_argument("--height", type=int, help="raw grayscale image height")
    common.add_argument("--limit", type=int, help="use only the first N training samples")
    common.add_argument("--test-limit", type=int, help="use only the first N test samples")

    p = _Parser(prog="bcpnn", description="Hypercolumn network engine with online Bayesian-Hebbian learning.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train and export a model")
    t.add_argument("--epochs-unsup", type=int)
    t.add_argument("--epochs-sup", type=int)
    t.add_argument("--shuffle", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a model through the inference pipeline")
    e.add_argument("--hard-wta", action="store_true")
    e.add_argument("--counters-csv")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="latency/accuracy over configuration variants")
    s.add_argument("--sweep", help="e.g. 'hcu=30,20,10;mcu=400,300,200;nact=320/80,160/40;precision=fp32,fp16'")
    s.add_argument("--n-synthetic", type=int, default=20)
    s.add_argument("--epochs-unsup", type=int)
    s.add_argument("--epochs-sup", type=int)
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export", parents=[common], help="re-encode a model (or a fresh network) in a precision")
    x.add_argument("--out")
    x.add_argument("--epochs-unsup", type=int)
    x.add_argument("--epochs-sup", type=int)
    x.set_defaults(func=cmd_export)

    i = sub.add_parser("inspect", parents=[common], help="dump a parameter-file header")
    i.add_argument("path", nargs="?")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", parents=[common], help="predict latency statistics")
    b.set_defaults(func=cmd_bench)
    return p


_USAGE_ERRORS = (UsageError, ConfigError, ShapeError, DomainError, ParamFileError, ValueError, FileNotFoundError)


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing command: train, eval, sweep, export, inspect or bench")
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (DatasetError, *_USAGE_ERRORS) as exc:
        return _fail(exc, EXIT_USAGE)
    except Exception as exc:
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
