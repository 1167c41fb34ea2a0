"""Full online-learning kernel: trace updates, weight derivation, rewiring and
the two-phase (unsupervised, then supervised) training loop.

Training arithmetic is float64 throughout. The precision modes only affect the
inference paths.

Input->hidden weights are derived lazily. The per-sample supports used while
learning are computed straight from the traces with the same formula that
``derive_weights`` applies, so the learning trajectory does not depend on when
the weight tensor is materialized. ``derive_weights`` runs before every rewire
event and at the end of every epoch.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .encoding import Dataset, complementary_encode
from .errors import DomainError, EmptyDataset, LabelError, ShapeError
from .inference import InferenceKernel, soft_wta
from .network import NetworkState, Projection, SparseConnectivity, TraceSet

EPS = 1e-8


@dataclass
class TrainingParams:
    alpha: float
    rewire_period: int
    n_replace: int
    shuffle: bool = False
    seed: int = 0
    eps: float = EPS
    # alpha_t = max(alpha, 1 / (t + warmup)); 0 disables the warm start
    warmup: float = 50.0
    # gain on log p_j in the hidden support while learning
    bias_gain: float = -3.0
    # log-normal jitter on the initial joint traces
    init_noise: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.rewire_period < 1:
            raise DomainError("rewire_period must be >= 1")
        if self.n_replace < 0:
            raise DomainError("n_replace must be >= 0")

    @classmethod
    def from_config(cls, config, n_train: int, shuffle: bool = False, **overrides) -> "TrainingParams":
        if n_train < 1:
            raise EmptyDataset("empty dataset")
        alpha = min(1.0, 1.0 / (config.tau_p * n_train))
        kw = dict(
            alpha=alpha,
            rewire_period=config.resolved_rewire_period(n_train),
            n_replace=config.resolved_n_replace(),
            shuffle=shuffle,
            seed=config.seed,
            warmup=config.warmup,
            bias_gain=config.unsup_bias_gain,
            init_noise=config.init_noise,
        )
        kw.update(overrides)
        return cls(**kw)

    def alpha_at(self, t: int) -> float:
        if self.warmup > 0:
            return min(1.0, max(self.alpha, 1.0 / (t + self.warmup)))
        return self.alpha


# ---------------------------------------------------------------- primitives


def _check_alpha(alpha):
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0, 1], got {alpha}")


def update_traces(traces: TraceSet, pre_act, post_act, alpha: float,
                  connectivity: SparseConnectivity | None = None) -> TraceSet:
    """One EMA step of all three traces, in place.

    For a sparse projection pass its connectivity; only stored pairs are
    updated.
    """
    _check_alpha(alpha)
    x = np.asarray(pre_act, dtype=np.float64)
    y = np.asarray(post_act, dtype=np.float64)
    if x.size != traces.p_pre.size or y.size != traces.p_post.size:
        raise ShapeError(
            f"activity sizes ({x.size}, {y.size}) do not match traces "
            f"({traces.p_pre.size}, {traces.p_post.size})"
        )
    x = x.reshape(traces.p_pre.shape)
    y = y.reshape(traces.p_post.shape)
    keep = 1.0 - alpha
    traces.p_pre *= keep
    traces.p_pre += alpha * x
    traces.p_post *= keep
    traces.p_post += alpha * y
    if traces.p_joint.ndim == 4:
        if connectivity is None:
            raise ShapeError("sparse traces need the projection connectivity")
        xc = np.ascontiguousarray(x[connectivity.slots])
        K.ema_joint_update(traces.p_joint, xc, np.ascontiguousarray(y), alpha)
    else:
        traces.p_joint *= keep
        traces.p_joint += alpha * np.outer(x.ravel(), y.ravel())
    return traces


def derive_weights(projection: Projection, eps: float = EPS) -> Projection:
    """b_j = log(p_j + eps), w_ij = log(p_ij + eps) - log(p_i + eps) - log(p_j + eps)."""
    tr = projection.traces
    lpost = np.log(tr.p_post + eps)
    if projection.is_sparse:
        lpre = np.log(tr.p_pre + eps)[projection.connectivity.slots]
        w = np.log(tr.p_joint + eps)
        w -= lpre[..., None]
        w -= lpost[:, None, None, :]
    else:
        w = np.log(tr.p_joint + eps)
        w -= np.log(tr.p_pre + eps)[:, None]
        w -= lpost[None, :]
    projection.weights[...] = w
    projection.biases[...] = lpost
    return projection


def connection_score(projection: Projection, hidden_hcu: int) -> np.ndarray:
    """Trace-estimated mutual information of every stored connection of one hidden HCU."""
    if not projection.is_sparse:
        raise ShapeError("connection_score needs a sparse projection")
    H = projection.connectivity.active.shape[0]
    if not 0 <= hidden_hcu < H:
        raise IndexError(f"hidden HCU {hidden_hcu} out of range [0, {H})")
    pj = projection.traces.p_joint[hidden_hcu]
    return (pj * projection.weights[hidden_hcu]).sum(axis=(1, 2))


def rewire(projection: Projection, params: TrainingParams, rng: np.random.Generator) -> Projection:
    """Re-rank connections by score and swap the weakest silent ones for fresh inputs.

    Weights must be current with respect to the traces.
    """
    conn = projection.connectivity
    tr = projection.traces
    n_act = conn.active.shape[1]
    n_input = tr.p_pre.shape[0]
    slots = conn.slots
    C = slots.shape[1]
    n_rep = min(params.n_replace, C - n_act)
    eps = params.eps
    for h in range(slots.shape[0]):
        score = connection_score(projection, h)
        order = np.lexsort((slots[h], -score))
        slots[h] = slots[h][order]
        tr.p_joint[h] = tr.p_joint[h][order]
        projection.weights[h] = projection.weights[h][order]
        if n_rep == 0:
            continue
        candidates = np.setdiff1d(np.arange(n_input), slots[h], assume_unique=False)
        k = min(n_rep, candidates.size)
        if k == 0:
            continue
        fresh = rng.choice(candidates, size=k, replace=False)
        lpost = np.log(tr.p_post[h] + eps)
        for r, q in enumerate(fresh):
            s = C - 1 - r
            slots[h, s] = q
            tr.p_joint[h, s] = np.outer(tr.p_pre[q], tr.p_post[h])
            projection.weights[h, s] = (
                np.log(tr.p_joint[h, s] + eps) - np.log(tr.p_pre[q] + eps)[:, None] - lpost[None, :]
            )
    conn.active = np.ascontiguousarray(slots[:, :n_act])
    conn.silent = np.ascontiguousarray(slots[:, n_act:])
    return projection


# ---------------------------------------------------------------- kernel

UNSUPERVISED = "unsupervised"
SUPERVISED = "supervised"


class FullKernel:
    """Per-sample stage functions of the training kernel.

    ``step`` runs them in order. The training pipeline runs the same functions
    from separate threads while holding the trace-dependency token.
    """

    def __init__(self, net: NetworkState, params: TrainingParams, phase: str = UNSUPERVISED):
        self.net = net
        self.params = params
        self.config = net.config
        self.rewire_rng = np.random.default_rng([params.seed, 2])
        self.t = 0
        self.phase = None
        cfg = net.config
        H, Mj = cfg.n_hidden_hcu, cfg.hidden_mcu_per_hcu
        rows = H * cfg.n_act * cfg.input_mcu_per_hcu
        self._buf = np.empty((rows, Mj))
        self._row_h = np.empty(rows, dtype=np.int64)
        self._row_x = np.empty(rows)
        self._row_q = np.empty(rows)
        self._support = np.empty((H, Mj))
        self.begin_phase(phase)

    # -- phase management
    def begin_phase(self, phase: str):
        if phase not in (UNSUPERVISED, SUPERVISED):
            raise ValueError(f"unknown phase {phase!r}")
        self.phase = phase
        self.t = 0
        if phase == SUPERVISED:
            ih = self.net.input_hidden
            n_act = ih.connectivity.active.shape[1]
            H, Mj = self.config.n_hidden_hcu, self.config.hidden_mcu_per_hcu
            self._w_frozen = np.ascontiguousarray(ih.weights[:, :n_act].reshape(H, -1, Mj))
            self._b_frozen = ih.biases.copy()

    def end_epoch(self):
        if self.phase == UNSUPERVISED:
            derive_weights(self.net.input_hidden, self.params.eps)
        else:
            derive_weights(self.net.hidden_output, self.params.eps)

    # -- stages
    def encode(self, image) -> np.ndarray:
        img = np.asarray(image)
        if img.size != self.config.n_input_hcu:
            raise ShapeError(f"image has {img.size} pixels, network expects {self.config.n_input_hcu}")
        return complementary_encode(img).reshape(self.config.n_input_hcu, self.config.input_mcu_per_hcu)

    def hidden_support(self, x2: np.ndarray):
        """Supports of all hidden HCUs plus the gathered per-slot activity."""
        ih = self.net.input_hidden
        slots = ih.connectivity.slots
        xc = np.ascontiguousarray(x2[slots])
        n_act = ih.connectivity.active.shape[1]
        if self.phase == SUPERVISED:
            xa = xc[:, :n_act].reshape(xc.shape[0], 1, -1)
            s = np.matmul(xa, self._w_frozen)[:, 0, :] + self._b_frozen
            return s, xc
        eps = self.params.eps
        tr = ih.traces
        lpre = np.log(tr.p_pre + eps)[slots]
        r = K.gather_joint_rows(tr.p_joint, xc, n_act, eps, lpre,
                                self._buf, self._row_h, self._row_x, self._row_q)
        logs = self._buf[:r]
        np.log(logs, out=logs)
        s = np.empty_like(self._support)
        K.support_from_log_rows(self._buf, r, self._row_h, self._row_x, self._row_q,
                                np.log(tr.p_post + eps), self.params.bias_gain, s)
        return s, xc

    def hidden_wta(self, s: np.ndarray) -> np.ndarray:
        return soft_wta(s, self.config.beta)

    def trace_update(self, x2, xc, y, label=None):
        alpha = self.params.alpha_at(self.t)
        if self.phase == UNSUPERVISED:
            tr = self.net.input_hidden.traces
            keep = 1.0 - alpha
            tr.p_pre *= keep
            tr.p_pre += alpha * x2
            tr.p_post *= keep
            tr.p_post += alpha * y
            K.ema_joint_update(tr.p_joint, xc, np.ascontiguousarray(y), alpha)
        else:
            n_classes = self.config.n_classes
            if label is None or not 0 <= int(label) < n_classes:
                raise LabelError(f"label {label} out of range for {n_classes} classes")
            tr = self.net.hidden_output.traces
            yf = y.ravel()
            keep = 1.0 - alpha
            tr.p_pre *= keep
            tr.p_pre += alpha * yf
            tr.p_post *= keep
            tr.p_post[int(label)] += alpha
            tr.p_joint *= keep
            tr.p_joint[:, int(label)] += alpha * yf
        self.net.x = x2.ravel().copy()
        self.net.y = y.ravel().copy()
        if label is not None:
            z = np.zeros(self.config.n_classes)
            z[int(label)] = 1.0
            self.net.z = z

    def weight_update(self):
        """Refresh what the next sample reads; the full weight tensors are derived lazily."""
        p = self.params
        self.t += 1
        if self.phase == UNSUPERVISED:
            ih = self.net.input_hidden
            np.log(ih.traces.p_post + p.eps, out=ih.biases)
            if self.t % p.rewire_period == 0:
                derive_weights(ih, p.eps)
                rewire(ih, p, self.rewire_rng)

    def output(self, y: np.ndarray) -> np.ndarray:
        ho = self.net.hidden_output
        return soft_wta(ho.biases + y.ravel() @ ho.weights, self.config.beta)

    @staticmethod
    def classify(probs) -> int:
        return int(np.argmax(probs))

    def step(self, image, label=None) -> np.ndarray:
        """One online learning step; returns the hidden activity."""
        x2 = self.encode(image)
        s, xc = self.hidden_support(x2)
        y = self.hidden_wta(s)
        self.trace_update(x2, xc, y, label)
        self.weight_update()
        return y

    # -- inference sub-path
    def inference_kernel(self, precision=None, parallel_factor=None, hard_wta=False) -> InferenceKernel:
        """Inference path over parameters freshly derived from this kernel's traces."""
        snap = self.net.copy()
        derive_weights(snap.input_hidden, self.params.eps)
        derive_weights(snap.hidden_output, self.params.eps)
        return InferenceKernel(snap, precision, parallel_factor, hard_wta)


# ---------------------------------------------------------------- loops


def _order(n: int, params: TrainingParams, epoch: int, phase_id: int) -> np.ndarray:
    if not params.shuffle:
        return np.arange(n)
    return np.random.default_rng([params.seed, 3, phase_id, epoch]).permutation(n)


def _apply_init_noise(net: NetworkState, params: TrainingParams):
    if params.init_noise > 0 and not net.meta.get("init_noise_applied"):
        rng = np.random.default_rng([params.seed, 1])
        pj = net.input_hidden.traces.p_joint
        pj *= np.exp(params.init_noise * rng.standard_normal(pj.shape))
        net.meta["init_noise_applied"] = True


def _record_constants(net: NetworkState, params: TrainingParams):
    net.meta["alpha"] = params.alpha
    net.meta["eps"] = params.eps
    net.precision = None


def train_unsupervised(net: NetworkState, dataset: Dataset, params: TrainingParams,
                       on_epoch=None) -> NetworkState:
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    epochs = net.config.epochs_unsup
    if epochs == 0:
        return net
    _apply_init_noise(net, params)
    _record_constants(net, params)
    kernel = FullKernel(net, params, UNSUPERVISED)
    images = dataset.images
    for ep in range(epochs):
        t0 = time.perf_counter()
        for n in _order(len(dataset), params, ep, 0):
            kernel.step(images[n])
        kernel.end_epoch()
        if on_epoch is not None:
            on_epoch(ep + 1, UNSUPERVISED, (time.perf_counter() - t0) * 1e3)
    return net


def train_supervised(net: NetworkState, dataset: Dataset, params: TrainingParams,
                     on_epoch=None) -> NetworkState:
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    epochs = net.config.epochs_sup
    if epochs == 0:
        return net
    labels = dataset.labels
    if labels.min() < 0 or labels.max() >= net.config.n_classes:
        raise LabelError(f"label out of range for {net.config.n_classes} classes")
    _record_constants(net, params)
    kernel = FullKernel(net, params, SUPERVISED)
    images = dataset.images
    for ep in range(epochs):
        t0 = time.perf_counter()
        for n in _order(len(dataset), params, ep, 1):
            kernel.step(images[n], labels[n])
        kernel.end_epoch()
        if on_epoch is not None:
            on_epoch(ep + 1, SUPERVISED, (time.perf_counter() - t0) * 1e3)
    return net


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    wall_ms: float
    test_accuracy: float = math.nan


@dataclass
class TrainResult:
    net: NetworkState
    metrics: list = field(default_factory=list)

    def csv(self) -> str:
        return metrics_csv(self.metrics)

    @property
    def final_accuracy(self) -> float:
        accs = [m.test_accuracy for m in self.metrics if not math.isnan(m.test_accuracy)]
        return accs[-1] if accs else math.nan


def metrics_csv(metrics) -> str:
    lines = ["epoch,phase,wall_ms,test_accuracy"]
    for m in metrics:
        acc = "" if math.isnan(m.test_accuracy) else f"{m.test_accuracy:.6f}"
        lines.append(f"{m.epoch},{m.phase},{m.wall_ms:.1f},{acc}")
    return "\n".join(lines) + "\n"


def _accuracy(net: NetworkState, test: Dataset) -> float:
    kernel = InferenceKernel(net, net.config.precision)
    preds = np.fromiter((kernel.predict(img).predicted_class for img in test.images),
                        dtype=np.int64, count=len(test))
    return float(np.mean(preds == test.labels))


def train_full(net: NetworkState, dataset: Dataset, params: TrainingParams | None = None,
               test: Dataset | None = None, on_metrics=None) -> TrainResult:
    """Unsupervised phase, then supervised phase, with per-epoch metrics.

    Test accuracy is measured after every supervised epoch when ``test`` is
    given; unsupervised epochs carry no accuracy.
    """
    if len(dataset) == 0:
        raise EmptyDataset("empty dataset")
    if params is None:
        params = TrainingParams.from_config(net.config, len(dataset))
    result = TrainResult(net)

    def record(epoch, phase, wall_ms):
        acc = math.nan
        if phase == SUPERVISED and test is not None and len(test):
            acc = _accuracy(net, test)
        m = EpochMetrics(epoch, phase, wall_ms, acc)
        result.metrics.append(m)
        if on_metrics is not None:
            on_metrics(m)

    train_unsupervised(net, dataset, params, on_epoch=record)
    train_supervised(net, dataset, params, on_epoch=record)
    return result
