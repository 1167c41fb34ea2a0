"""Inference-only kernel: supports, soft-WTA and classification.

``compute_support`` and ``soft_wta`` are the float64 reference operations.
``InferenceKernel`` is the deployable path: parameters are placed on the
storage grid of a precision mode once, and every support is accumulated by the
compiled kernels with that mode's rounding points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .encoding import Dataset, complementary_encode
from .errors import DomainError, EmptyDataset, ShapeError
from .network import NetworkState, Projection
from .precision import FP32, PrecisionMode, Tag, activation_grid, q312_saturations, weight_grid


def soft_wta(supports, beta: float = 1.0) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    s = np.asarray(supports, dtype=np.float64)
    if np.isnan(s).any():
        raise DomainError("NaN in supports")
    if not beta > 0:
        raise DomainError("beta must be positive")
    z = beta * (s - s.max(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _soft_wta_f32(supports, beta: float) -> np.ndarray:
    s = np.asarray(supports, dtype=np.float32)
    z = np.float32(beta) * (s - s.max(axis=-1, keepdims=True))
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float64)


def compute_support(pre_activity, projection: Projection, hcu: int = 0) -> np.ndarray:
    """s_j = b_j + sum over active connections of w_ij * x_i, in float64."""
    x = np.asarray(pre_activity, dtype=np.float64)
    if projection.is_sparse:
        conn = projection.connectivity
        n_in, m_in = projection.traces.p_pre.shape
        if x.size != n_in * m_in:
            raise ShapeError(f"pre activity has {x.size} entries, expected {n_in * m_in}")
        if not 0 <= hcu < conn.active.shape[0]:
            raise IndexError(f"hidden HCU {hcu} out of range")
        n_act = conn.active.shape[1]
        xa = x.reshape(n_in, m_in)[conn.active[hcu]]
        return projection.biases[hcu] + np.einsum("ci,cij->j", xa, projection.weights[hcu, :n_act])
    if x.size != projection.weights.shape[0]:
        raise ShapeError(f"pre activity has {x.size} entries, expected {projection.weights.shape[0]}")
    if hcu != 0:
        raise IndexError("dense projection has a single post-synaptic HCU")
    return projection.biases + x.ravel() @ projection.weights


@dataclass
class InferenceResult:
    predicted_class: int
    output_probabilities: np.ndarray
    hidden_activity: np.ndarray | None = None


def default_parallel_factor(mode: PrecisionMode) -> int:
    return 8 if mode.tag == Tag.FP32 else 16


class InferenceKernel:
    """Parameters of one network prepared for a single precision mode."""

    def __init__(self, net: NetworkState, precision: PrecisionMode | None = None,
                 parallel_factor: int | None = None, hard_wta: bool = False):
        mode = precision or net.precision or FP32
        cfg = net.config
        self.mode = mode
        self.config = cfg
        self.parallel_factor = parallel_factor or default_parallel_factor(mode)
        if self.parallel_factor < 1:
            raise ValueError("parallel_factor must be >= 1")
        self.hard_wta = hard_wta
        self.beta = cfg.beta

        ih, ho = net.input_hidden, net.hidden_output
        H, n_act = ih.connectivity.active.shape
        Mi, Mj = cfg.input_mcu_per_hcu, cfg.hidden_mcu_per_hcu
        self.active = ih.connectivity.active.copy()
        w_act = ih.weights[:, :n_act]
        # binary32 products need binary32 operands only; store them compactly
        wdt = np.float32 if mode.product_round == K.ROUND_F32 else np.float64
        self.w_hidden = np.ascontiguousarray(weight_grid(w_act, mode).reshape(H, n_act * Mi, Mj), dtype=wdt)
        self.b_hidden = np.ascontiguousarray(weight_grid(ih.biases, mode))
        self.w_out = np.ascontiguousarray(weight_grid(ho.weights, mode), dtype=wdt)
        self.b_out = np.ascontiguousarray(weight_grid(ho.biases, mode))
        if mode.tag == Tag.MIXED and net.precision != mode:
            self.saturations = sum(q312_saturations(a) for a in (w_act, ih.biases, ho.weights, ho.biases))
        else:
            self.saturations = net.saturations if mode.tag == Tag.MIXED else 0
        self._warm()

    def _warm(self):
        # compile (or load from cache) outside any timed region
        m = self.mode
        w = np.ascontiguousarray(self.w_hidden[:1, :1, :1])
        x = np.ones((1, 1))
        b = np.zeros((1, 1))
        K.blocked_support(w, x, b, self.parallel_factor, m.product_round, m.accumulate_round, m.support_round)
        K.dense_support(np.ascontiguousarray(self.w_out[:1, :1]), np.ones(1), np.zeros(1),
                        self.parallel_factor, m.product_round, m.accumulate_round, m.support_round)

    # stage functions; the pipeline runs these in separate contexts
    def encode(self, image) -> np.ndarray:
        img = np.asarray(image)
        if img.size != self.config.n_input_hcu:
            raise ShapeError(f"image has {img.size} pixels, network expects {self.config.n_input_hcu}")
        x = activation_grid(complementary_encode(img), self.mode)
        n_in, mi = self.config.n_input_hcu, self.config.input_mcu_per_hcu
        H = self.active.shape[0]
        return np.ascontiguousarray(x.reshape(n_in, mi)[self.active].reshape(H, -1))

    def hidden_support(self, xa: np.ndarray) -> np.ndarray:
        m = self.mode
        return K.blocked_support(self.w_hidden, xa, self.b_hidden, self.parallel_factor,
                                 m.product_round, m.accumulate_round, m.support_round)

    def hidden_wta(self, s: np.ndarray) -> np.ndarray:
        if self.hard_wta:
            y = np.zeros_like(s)
            y[np.arange(s.shape[0]), np.argmax(s, axis=1)] = 1.0
            return y.ravel()
        return activation_grid(_soft_wta_f32(s, self.beta), self.mode).ravel()

    def output_support(self, y: np.ndarray) -> np.ndarray:
        m = self.mode
        return K.dense_support(self.w_out, y, self.b_out, self.parallel_factor,
                               m.product_round, m.accumulate_round, m.support_round)

    def output_wta(self, s: np.ndarray) -> np.ndarray:
        return _soft_wta_f32(s, self.beta)

    @staticmethod
    def classify(probs: np.ndarray) -> int:
        return int(np.argmax(probs))

    def predict(self, image, keep_hidden: bool = False) -> InferenceResult:
        y = self.hidden_wta(self.hidden_support(self.encode(image)))
        probs = self.output_wta(self.output_support(y))
        return InferenceResult(self.classify(probs), probs, y if keep_hidden else None)

    @property
    def ops_per_image(self) -> int:
        return op_count(self.config)


def op_count(config) -> int:
    """Support multiply-adds per image: hidden layer plus output layer."""
    hidden = config.n_hidden_hcu * config.hidden_mcu_per_hcu * config.n_act * config.input_mcu_per_hcu
    output = config.n_hidden_hcu * config.hidden_mcu_per_hcu * config.n_classes
    return hidden + output


def predict(net: NetworkState, image, precision: PrecisionMode | None = None) -> InferenceResult:
    return InferenceKernel(net, precision).predict(image, keep_hidden=True)


@dataclass
class EvalReport:
    precision: str
    accuracy: float
    confusion: np.ndarray
    latencies_us: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    saturations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.labels)

    def latency_stats(self) -> dict:
        return latency_stats(self.latencies_us)

    def csv(self) -> str:
        lines = ["sample,label,pred,latency_us"]
        for i, (lab, pred, lat) in enumerate(zip(self.labels, self.predictions, self.latencies_us)):
            lines.append(f"{i},{lab},{pred},{lat:.1f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        st = self.latency_stats()
        out = [
            f"precision      {self.precision}",
            f"samples        {self.n}",
            f"accuracy       {self.accuracy:.4f}",
            f"latency us     min {st['min']:.1f}  mean {st['mean']:.1f}  median {st['median']:.1f}  p95 {st['p95']:.1f}",
            f"q3.12 saturations {self.saturations}",
            "confusion (rows = label, cols = prediction)",
        ]
        for row in self.confusion:
            out.append("  " + " ".join(f"{v:6d}" for v in row))
        return "\n".join(out)


def latency_stats(latencies_us) -> dict:
    lat = np.asarray(latencies_us, dtype=np.float64)
    if lat.size == 0:
        return dict(min=0.0, max=0.0, mean=0.0, median=0.0, p95=0.0, n=0)
    return dict(
        min=float(lat.min()),
        max=float(lat.max()),
        mean=float(lat.mean()),
        median=float(np.median(lat)),
        p95=float(np.percentile(lat, 95)),
        n=int(lat.size),
    )


def evaluate(net: NetworkState, dataset: Dataset, precision: PrecisionMode | None = None,
             parallel_factor: int | None = None, hard_wta: bool = False) -> EvalReport:
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    kernel = InferenceKernel(net, precision, parallel_factor, hard_wta)
    n = len(dataset)
    preds = np.empty(n, dtype=np.int64)
    lat = np.empty(n)
    clock = time.perf_counter
    for k in range(n):
        t0 = clock()
        preds[k] = kernel.predict(dataset.images[k]).predicted_class
        lat[k] = (clock() - t0) * 1e6
    return make_report(kernel, dataset.labels, preds, lat)


def make_report(kernel: InferenceKernel, labels, preds, lat_us) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    k = kernel.config.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    acc = float(np.mean(labels == preds)) if labels.size else 0.0
    return EvalReport(str(kernel.mode), acc, confusion, np.asarray(lat_us, dtype=np.float64),
                      labels, preds, kernel.saturations)
