"""Staged streaming execution over bounded FIFO channels.

Every stage runs in its own thread and talks to its neighbours only through
``queue.Queue(maxsize=channel_capacity)``. Items carry their sample index and
the compute time accumulated so far, so each output also reports the kernel
time spent on it without queueing delays.

Training pipelines keep the online ordering contract with a single token: a
sample takes it before its hidden supports read the traces and hands it back
once its weight update is done. Encoding of the next sample and the output
stages of the previous one still overlap with the update.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PipelineError
from .inference import InferenceKernel, InferenceResult, default_parallel_factor
from .learning import SUPERVISED, UNSUPERVISED, FullKernel, TrainingParams
from .network import NetworkState
from .precision import FP32, PrecisionMode

INFER = "infer"
TRAIN = "train"

INFER_STAGES = ("encode", "hidden-support", "hidden-wta", "output-support/wta", "classify")
TRAIN_STAGES = (
    "encode",
    "hidden-support",
    "hidden-wta",
    "trace-update",
    "weight-update",
    "output-support/wta",
    "classify",
)
TRAIN_PARALLEL_FACTOR = 4
DEFAULT_CAPACITY = 64
_POLL = 0.05
_END = object()


@dataclass
class PipelineSpec:
    stages: tuple = INFER_STAGES
    channel_capacity: int = DEFAULT_CAPACITY
    parallel_factor: int | None = None

    @classmethod
    def default(cls, kind: str, precision: PrecisionMode = FP32, channel_capacity: int = DEFAULT_CAPACITY,
                parallel_factor: int | None = None) -> "PipelineSpec":
        if kind == INFER:
            return cls(INFER_STAGES, channel_capacity, parallel_factor or default_parallel_factor(precision))
        if kind == TRAIN:
            return cls(TRAIN_STAGES, channel_capacity, parallel_factor or TRAIN_PARALLEL_FACTOR)
        raise ConfigError([f"unknown pipeline kind {kind!r}"])

    def violations(self, kind: str) -> list[str]:
        v = []
        if self.channel_capacity < 1:
            v.append("channel_capacity must be >= 1")
        if self.parallel_factor is not None and self.parallel_factor < 1:
            v.append("parallel_factor must be >= 1")
        expected = {INFER: INFER_STAGES, TRAIN: TRAIN_STAGES}.get(kind)
        if expected is None:
            v.append(f"unknown pipeline kind {kind!r}")
        elif tuple(self.stages) != expected:
            v.append(f"stage list for {kind} must be {' -> '.join(expected)}")
        return v


@dataclass
class StageCounters:
    stage: str
    items_processed: int = 0
    send_stalls: int = 0
    receive_stalls: int = 0
    busy_time: float = 0.0  # seconds

    @property
    def busy_us(self) -> float:
        return self.busy_time * 1e6


@dataclass
class _Stage:
    name: str
    fn: object
    take_token: bool = False
    give_token: bool = False


@dataclass
class Pipeline:
    kind: str
    spec: PipelineSpec
    stages: list
    kernel: object
    token: threading.Semaphore | None = None

    @property
    def stage_names(self) -> tuple:
        return tuple(s.name for s in self.stages)


@dataclass
class TrainOutput:
    predicted_class: int
    output_probabilities: np.ndarray
    hidden_activity: np.ndarray


@dataclass
class StreamResult:
    outputs: list
    counters: list
    latencies_us: np.ndarray = field(default_factory=lambda: np.empty(0))
    wall_time: float = 0.0


def build_pipeline(net: NetworkState, kind: str, spec: PipelineSpec | None = None,
                   precision: PrecisionMode | None = None, params: TrainingParams | None = None,
                   phase: str = UNSUPERVISED, hard_wta: bool = False) -> Pipeline:
    """Wire the stage functions of the matching kernel into a pipeline."""
    mode = precision or net.precision or FP32
    spec = spec or PipelineSpec.default(kind, mode)
    problems = spec.violations(kind)
    if problems:
        raise ConfigError(problems)

    if kind == INFER:
        k = InferenceKernel(net, mode, spec.parallel_factor, hard_wta)

        def out_stage(y):
            return k.output_wta(k.output_support(y))

        def classify(probs):
            return InferenceResult(k.classify(probs), probs)

        stages = [
            _Stage("encode", k.encode),
            _Stage("hidden-support", k.hidden_support),
            _Stage("hidden-wta", k.hidden_wta),
            _Stage("output-support/wta", out_stage),
            _Stage("classify", classify),
        ]
        return Pipeline(kind, spec, stages, k)

    if params is None:
        raise ConfigError(["train pipelines need TrainingParams"])
    k = FullKernel(net, params, phase)

    def encode(item):
        image, label = item
        return k.encode(image), label

    def hidden_support(item):
        x2, label = item
        s, xc = k.hidden_support(x2)
        return x2, xc, s, label

    def hidden_wta(item):
        x2, xc, s, label = item
        return x2, xc, k.hidden_wta(s), label

    def trace_update(item):
        x2, xc, y, label = item
        k.trace_update(x2, xc, y, label)
        return y

    def weight_update(y):
        k.weight_update()
        return y

    def out_stage(y):
        return y, k.output(y)

    def classify(item):
        y, probs = item
        return TrainOutput(k.classify(probs), probs, y)

    stages = [
        _Stage("encode", encode),
        _Stage("hidden-support", hidden_support, take_token=True),
        _Stage("hidden-wta", hidden_wta),
        _Stage("trace-update", trace_update),
        _Stage("weight-update", weight_update, give_token=True),
        _Stage("output-support/wta", out_stage),
        _Stage("classify", classify),
    ]
    return Pipeline(kind, spec, stages, k, threading.Semaphore(1))


def _get(q: queue.Queue, stop: threading.Event, c: StageCounters):
    try:
        return q.get_nowait()
    except queue.Empty:
        pass
    while not stop.is_set():
        try:
            item = q.get(timeout=_POLL)
        except queue.Empty:
            continue
        # waiting for the end marker is not a stall
        if item is not _END:
            c.receive_stalls += 1
        return item
    return _END


def _put(q: queue.Queue, item, stop: threading.Event, c: StageCounters | None) -> bool:
    try:
        q.put_nowait(item)
        return True
    except queue.Full:
        if c is not None:
            c.send_stalls += 1
    while not stop.is_set():
        try:
            q.put(item, timeout=_POLL)
            return True
        except queue.Full:
            continue
    return False


def _acquire(token: threading.Semaphore, stop: threading.Event, c: StageCounters) -> bool:
    if token.acquire(blocking=False):
        return True
    c.receive_stalls += 1
    while not stop.is_set():
        if token.acquire(timeout=_POLL):
            return True
    return False


def _stage_loop(stage: _Stage, inq, outq, c: StageCounters, stop, errors, token):
    clock = time.perf_counter
    while True:
        item = _get(inq, stop, c)
        if item is _END:
            _put(outq, _END, stop, None)
            return
        idx, payload, spent = item
        if stage.take_token and not _acquire(token, stop, c):
            return
        t0 = clock()
        try:
            out = stage.fn(payload)
        except BaseException as exc:  # surfaced by run_stream
            errors.append((stage.name, exc))
            stop.set()
            return
        dt = clock() - t0
        if stage.give_token:
            token.release()
        c.busy_time += dt
        c.items_processed += 1
        if not _put(outq, (idx, out, spent + dt), stop, c):
            return


def run_stream(pipeline: Pipeline, samples) -> StreamResult:
    """Push every sample through the pipeline; outputs come back in input order.

    For train pipelines each sample is an ``(image, label)`` pair (label may be
    None in the unsupervised phase); for infer pipelines it is an image.
    """
    cap = pipeline.spec.channel_capacity
    n_st = len(pipeline.stages)
    chans = [queue.Queue(maxsize=cap) for _ in range(n_st + 1)]
    counters = [StageCounters(s.name) for s in pipeline.stages]
    stop = threading.Event()
    errors: list = []
    train = pipeline.kind == TRAIN

    threads = [
        threading.Thread(
            target=_stage_loop,
            args=(st, chans[i], chans[i + 1], counters[i], stop, errors, pipeline.token),
            name=f"stage-{st.name}",
            daemon=True,
        )
        for i, st in enumerate(pipeline.stages)
    ]

    def feed():
        for i, s in enumerate(samples):
            item = (s if isinstance(s, tuple) else (s, None)) if train else s
            if not _put(chans[0], (i, item, 0.0), stop, None):
                return
        _put(chans[0], _END, stop, None)

    feeder = threading.Thread(target=feed, name="stage-source", daemon=True)
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    feeder.start()

    outputs, lat = [], []
    sink = chans[-1]
    while True:
        try:
            item = sink.get(timeout=_POLL)
        except queue.Empty:
            if stop.is_set():
                break
            continue
        if item is _END:
            break
        _, out, spent = item
        outputs.append(out)
        lat.append(spent * 1e6)

    if errors:
        stop.set()
    feeder.join()
    for t in threads:
        t.join()
    wall = time.perf_counter() - t0
    if errors:
        name, exc = errors[0]
        raise PipelineError(name, exc) from exc
    return StreamResult(outputs, counters, np.asarray(lat, dtype=np.float64), wall)


def run_sequential(pipeline: Pipeline, samples) -> list:
    """Reference execution: the same stage functions called one sample at a time."""
    train = pipeline.kind == TRAIN
    out = []
    for s in samples:
        v = (s if isinstance(s, tuple) else (s, None)) if train else s
        for st in pipeline.stages:
            v = st.fn(v)
        out.append(v)
    return out


def bottleneck(counters) -> str | None:
    busy = [c for c in counters if c.items_processed or c.busy_time]
    if not busy:
        return None
    return max(busy, key=lambda c: c.busy_time).stage


def counters_csv(counters) -> str:
    lines = ["stage,items,send_stalls,recv_stalls,busy_us"]
    for c in counters:
        lines.append(f"{c.stage},{c.items_processed},{c.send_stalls},{c.receive_stalls},{c.busy_us:.1f}")
    return "\n".join(lines) + "\n"


def counters_report(counters) -> str:
    """Plain-text table: throughput, stall ratios and busy time per stage."""
    neck = bottleneck(counters)
    head = f"{'stage':<20}{'items':>8}{'items/s':>12}{'send stall':>12}{'recv stall':>12}{'busy us':>14}"
    rows = [head, "-" * len(head)]
    for c in counters:
        n = c.items_processed
        rate = n / c.busy_time if c.busy_time > 0 else 0.0
        ss = c.send_stalls / n if n else 0.0
        rs = c.receive_stalls / n if n else 0.0
        mark = "  <- bottleneck" if c.stage == neck else ""
        rows.append(f"{c.stage:<20}{n:>8}{rate:>12.1f}{ss:>12.3f}{rs:>12.3f}{c.busy_us:>14.1f}{mark}")
    return "\n".join(rows)


def stream_training(net: NetworkState, dataset, params: TrainingParams, phase: str,
                    spec: PipelineSpec | None = None) -> StreamResult:
    """One epoch of one phase through the training pipeline."""
    pipe = build_pipeline(net, TRAIN, spec, params=params, phase=phase)
    labels = dataset.labels if phase == SUPERVISED else [None] * len(dataset)
    res = run_stream(pipe, list(zip(dataset.images, labels)))
    pipe.kernel.end_epoch()
    return res
