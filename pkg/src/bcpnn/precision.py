"""Numeric regimes for inference: FP32, IEEE binary16 and Q3.12 storage.

Half values are handled as uint16 bit patterns (``to_half``/``from_half``) or,
inside kernels, as float64 numbers that sit exactly on the binary16 grid.
Q3.12 values are int16 raw integers with an implied scale of 2**-12.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

HALF_MAX = 65504.0
Q_SCALE = 4096
Q_RAW_MIN = -32768
Q_RAW_MAX = 32767
Q_MAX = Q_RAW_MAX / Q_SCALE
Q_MIN = Q_RAW_MIN / Q_SCALE


class Tag(enum.IntEnum):
    FP32 = 0
    FP16 = 1
    MIXED = 2


class Strictness(enum.Enum):
    STRICT = "strict"
    STORAGE = "storage"


_TAG_NAMES = {"fp32": Tag.FP32, "fp16": Tag.FP16, "mixed": Tag.MIXED, "mixedq312": Tag.MIXED}


@dataclass(frozen=True)
class PrecisionMode:
    tag: Tag = Tag.FP32
    strictness: Strictness = Strictness.STRICT

    @classmethod
    def parse(cls, name: str, strictness: str = "strict") -> "PrecisionMode":
        try:
            tag = _TAG_NAMES[name.lower()]
        except KeyError:
            raise ValueError(f"unknown precision {name!r}; expected fp32, fp16 or mixed") from None
        if strictness in ("storage-only", "storage_only"):
            strictness = "storage"
        return cls(tag, Strictness(strictness))

    @property
    def name(self) -> str:
        return {Tag.FP32: "fp32", Tag.FP16: "fp16", Tag.MIXED: "mixed"}[self.tag]

    def __str__(self) -> str:
        if self.tag == Tag.FP32:
            return "fp32"
        return f"{self.name}/{self.strictness.value}"

    # rounding codes used by the compiled kernels
    @property
    def product_round(self) -> int:
        if self.tag == Tag.FP32 or self.strictness == Strictness.STORAGE:
            return K.ROUND_F32
        return K.ROUND_F16

    @property
    def accumulate_round(self) -> int:
        return self.product_round

    @property
    def support_round(self) -> int:
        return K.ROUND_F32 if self.tag == Tag.FP32 else K.ROUND_F16

    @property
    def element_bytes(self) -> int:
        return 4 if self.tag == Tag.FP32 else 2


FP32 = PrecisionMode(Tag.FP32)
FP16 = PrecisionMode(Tag.FP16)
MIXED = PrecisionMode(Tag.MIXED)


# ------------------------------------------------------------------ binary16


def round_half_array(x) -> np.ndarray:
    """Round float64 values to the binary16 grid, ties to even."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    finite = np.isfinite(x) & (x != 0.0)
    xf = x[finite]
    _, e = np.frexp(xf)
    q = np.where(e >= -13, e - 11, -24)
    with np.errstate(over="ignore"):
        v = np.ldexp(np.rint(np.ldexp(xf, -q)), q)
    v = np.where(np.abs(v) > HALF_MAX, np.copysign(np.inf, xf), v)
    v = np.where(v == 0.0, np.copysign(0.0, xf), v)
    out[finite] = v
    return out


def to_half(x) -> np.ndarray | int:
    """Encode real value(s) as binary16 bit patterns (uint16)."""
    scalar = np.ndim(x) == 0
    v = round_half_array(np.atleast_1d(x))
    sign = np.signbit(v).astype(np.uint16) << 15
    a = np.abs(v)
    bits = np.zeros(v.shape, dtype=np.uint16)
    nan = np.isnan(a)
    inf = np.isinf(a)
    sub = (a < 2.0**-14) & ~nan
    norm = ~(nan | inf | sub)
    bits[nan] = 0x7E00
    bits[inf] = 0x7C00
    bits[sub] = np.rint(a[sub] * 2.0**24).astype(np.uint16)
    if norm.any():
        _, e = np.frexp(a[norm])
        mant = np.rint((np.ldexp(a[norm], 1 - e) - 1.0) * 1024).astype(np.uint16)
        bits[norm] = ((e + 14).astype(np.uint16) << 10) | mant
    bits |= sign
    return int(bits[0]) if scalar else bits


def from_half(bits) -> np.ndarray | float:
    """Decode binary16 bit pattern(s) to float64."""
    scalar = np.ndim(bits) == 0
    b = np.atleast_1d(np.asarray(bits)).astype(np.uint32)
    sign = np.where(b & 0x8000, -1.0, 1.0)
    exp = ((b >> 10) & 0x1F).astype(np.int64)
    mant = (b & 0x3FF).astype(np.float64)
    out = np.where(
        exp == 0,
        np.ldexp(mant, -24),
        np.ldexp(1.0 + mant / 1024.0, exp - 15),
    )
    special = exp == 31
    out = np.where(special & (mant == 0), np.inf, out)
    out = np.where(special & (mant != 0), np.nan, out)
    out = sign * out
    return float(out[0]) if scalar else out


# ------------------------------------------------------------------ Q3.12


def to_q312(x) -> np.ndarray | int:
    """Quantize to Q3.12 raw int16 with round-half-even and saturation."""
    scalar = np.ndim(x) == 0
    v = np.atleast_1d(np.asarray(x, dtype=np.float64))
    v = np.clip(np.nan_to_num(v, nan=0.0), 2.0 * Q_MIN, 2.0 * Q_MAX)
    raw = np.rint(v * Q_SCALE)
    raw = np.clip(raw, Q_RAW_MIN, Q_RAW_MAX).astype(np.int16)
    return int(raw[0]) if scalar else raw


def from_q312(raw) -> np.ndarray | float:
    scalar = np.ndim(raw) == 0
    out = np.atleast_1d(np.asarray(raw)).astype(np.float64) / Q_SCALE
    return float(out[0]) if scalar else out


def q312_saturations(x) -> int:
    """Number of elements that saturate when quantized to Q3.12."""
    v = np.clip(np.asarray(x, dtype=np.float64), 2.0 * Q_MIN, 2.0 * Q_MAX) * Q_SCALE
    return int(np.count_nonzero((np.rint(v) > Q_RAW_MAX) | (np.rint(v) < Q_RAW_MIN)))


# ------------------------------------------------------------------ storage grids


def weight_grid(x, mode: PrecisionMode) -> np.ndarray:
    """Round parameters to the storage format of ``mode`` (float64 result)."""
    x = np.asarray(x, dtype=np.float64)
    if mode.tag == Tag.FP32:
        return x.astype(np.float32).astype(np.float64)
    if mode.tag == Tag.FP16:
        return round_half_array(x)
    return from_q312(to_q312(x)).reshape(x.shape)


activation_grid = weight_grid


def reduced_dot(weights, activations, mode: PrecisionMode) -> float:
    """Dot product with the rounding points of ``mode``.

    Operands are first placed on the mode's storage grid (a no-op for values
    already stored at that precision). FP32 accumulates in binary32. FP16
    strict and mixed strict round every product and running sum to binary16;
    storage-only variants accumulate in binary32 and round the result once.
    """
    w = np.asarray(weights, dtype=np.float64).ravel()
    a = np.asarray(activations, dtype=np.float64).ravel()
    if w.shape != a.shape:
        raise ValueError(f"length mismatch: {w.size} weights vs {a.size} activations")
    w = weight_grid(w, mode)
    a = activation_grid(a, mode)
    acc = K.reduced_dot_kernel(w, a, mode.product_round, mode.accumulate_round)
    return float(K.apply_round(acc, mode.support_round))


def cast_model(net, mode: PrecisionMode):
    """Return a copy of ``net`` with weights/biases on the storage grid of ``mode``.

    FP32 returns an unchanged copy. The copy records the mode in
    ``net.precision`` and, for mixed mode, the number of parameters that
    saturated in ``net.saturations``.
    """
    out = net.copy()
    sat = 0
    if mode.tag == Tag.FP32:
        # binary32 rounding happens when an inference kernel loads the model
        out.precision = mode
        out.saturations = 0
        return out
    for proj in (out.input_hidden, out.hidden_output):
        if mode.tag == Tag.MIXED:
            sat += q312_saturations(proj.weights) + q312_saturations(proj.biases)
        proj.weights = weight_grid(proj.weights, mode)
        proj.biases = weight_grid(proj.biases, mode)
    out.precision = mode
    out.saturations = sat
    return out
