"""Network data model: populations, projections, sparse connectivity, traces.

Layout of the input->hidden projection (H hidden HCUs, C = n_act + n_sil
connection slots per HCU, Mi input MCUs per pixel, Mj hidden MCUs per HCU):

    connectivity.active   (H, n_act)      input-HCU indices, slots 0..n_act-1
    connectivity.silent   (H, n_sil)      input-HCU indices, slots n_act..C-1
    traces.p_pre          (n_input, Mi)
    traces.p_post         (H, Mj)
    traces.p_joint        (H, C, Mi, Mj)  one block per stored HCU pair
    weights               (H, C, Mi, Mj)
    biases                (H, Mj)

The hidden->output projection is dense: p_pre (H*Mj,), p_post (K,),
p_joint and weights (H*Mj, K), biases (K,).
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig, check_config
from .precision import PrecisionMode


@dataclass
class SparseConnectivity:
    active: np.ndarray
    silent: np.ndarray

    @property
    def slots(self) -> np.ndarray:
        return np.concatenate([self.active, self.silent], axis=1)

    def violations(self, n_input_hcu: int, n_act: int, n_sil: int) -> list[str]:
        v = []
        if self.active.shape[1] != n_act:
            v.append(f"expected {n_act} active connections, found {self.active.shape[1]}")
        if self.silent.shape[1] != n_sil:
            v.append(f"expected {n_sil} silent connections, found {self.silent.shape[1]}")
        slots = self.slots
        if slots.size and (slots.min() < 0 or slots.max() >= n_input_hcu):
            v.append("connection index out of range")
        for h, row in enumerate(slots):
            if np.unique(row).size != row.size:
                v.append(f"duplicate connection in hidden HCU {h}")
        return v


@dataclass
class TraceSet:
    p_pre: np.ndarray
    p_post: np.ndarray
    p_joint: np.ndarray


@dataclass
class Projection:
    traces: TraceSet
    weights: np.ndarray
    biases: np.ndarray
    connectivity: SparseConnectivity | None = None

    @property
    def is_sparse(self) -> bool:
        return self.connectivity is not None


@dataclass
class NetworkState:
    config: NetworkConfig
    input_hidden: Projection
    hidden_output: Projection
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    # None while parameters are float64 training masters
    precision: PrecisionMode | None = None
    saturations: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "NetworkState":
        return copy.deepcopy(self)

    def arrays(self):
        """(name, array) pairs covering every numeric field, in fixed order."""
        out = []
        for pname in ("input_hidden", "hidden_output"):
            p = getattr(self, pname)
            out += [
                (f"{pname}.p_pre", p.traces.p_pre),
                (f"{pname}.p_post", p.traces.p_post),
                (f"{pname}.p_joint", p.traces.p_joint),
                (f"{pname}.weights", p.weights),
                (f"{pname}.biases", p.biases),
            ]
            if p.connectivity is not None:
                out += [
                    (f"{pname}.active", p.connectivity.active),
                    (f"{pname}.silent", p.connectivity.silent),
                ]
        out += [("x", self.x), ("y", self.y), ("z", self.z)]
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays():
            a = np.ascontiguousarray(arr)
            h.update(name.encode())
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()


def init_traces(projection: Projection, config: NetworkConfig) -> Projection:
    """Reset traces to independence priors: p_joint = p_pre * p_post."""
    tr = projection.traces
    if projection.is_sparse:
        m_pre, m_post = config.input_mcu_per_hcu, config.hidden_mcu_per_hcu
        tr.p_pre[...] = 1.0 / m_pre
        tr.p_post[...] = 1.0 / m_post
        tr.p_joint[...] = (1.0 / m_pre) * (1.0 / m_post)
    else:
        m_pre, m_post = config.hidden_mcu_per_hcu, config.n_classes
        tr.p_pre[...] = 1.0 / m_pre
        tr.p_post[...] = 1.0 / m_post
        tr.p_joint[...] = (1.0 / m_pre) * (1.0 / m_post)
    return projection


def draw_connectivity(config: NetworkConfig, rng: np.random.Generator) -> SparseConnectivity:
    n_conn = config.n_connections
    rows = [rng.choice(config.n_input_hcu, size=n_conn, replace=False) for _ in range(config.n_hidden_hcu)]
    slots = np.array(rows, dtype=np.int64).reshape(config.n_hidden_hcu, n_conn)
    return SparseConnectivity(
        active=slots[:, : config.n_act].copy(),
        silent=slots[:, config.n_act :].copy(),
    )


def connectivity_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def build_network(config: NetworkConfig) -> NetworkState:
    """Fresh network: random sparse connectivity, prior traces, zero weights."""
    check_config(config)
    H, Mj, Mi = config.n_hidden_hcu, config.hidden_mcu_per_hcu, config.input_mcu_per_hcu
    C, K, N = config.n_connections, config.n_classes, config.n_input_hcu

    conn = draw_connectivity(config, connectivity_rng(config.seed))
    ih = Projection(
        traces=TraceSet(
            p_pre=np.empty((N, Mi)),
            p_post=np.empty((H, Mj)),
            p_joint=np.empty((H, C, Mi, Mj)),
        ),
        weights=np.zeros((H, C, Mi, Mj)),
        biases=np.full((H, Mj), np.log(1.0 / Mj)),
        connectivity=conn,
    )
    ho = Projection(
        traces=TraceSet(
            p_pre=np.empty(H * Mj),
            p_post=np.empty(K),
            p_joint=np.empty((H * Mj, K)),
        ),
        weights=np.zeros((H * Mj, K)),
        biases=np.full(K, np.log(1.0 / K)),
    )
    init_traces(ih, config)
    init_traces(ho, config)
    return NetworkState(
        config=config,
        input_hidden=ih,
        hidden_output=ho,
        x=np.zeros(N * Mi),
        y=np.zeros(H * Mj),
        z=np.zeros(K),
    )
