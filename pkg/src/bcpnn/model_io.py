"""Versioned little-endian parameter file.

Layout (all integers unsigned little-endian unless noted)::

    header   76 bytes
      0  4s   magic "BCPN"
      4  u16  version (1)
      6  u8   precision tag (0 fp32, 1 fp16, 2 mixed Q3.12)
      7  u8   strictness (0 strict, 1 storage)
      8  u32  n_input_hcu
     12  u32  input_mcu_per_hcu
     16  u32  n_hidden_hcu
     20  u32  hidden_mcu_per_hcu
     24  u32  n_classes
     28  u32  n_act
     32  u32  n_sil
     36  u32  epochs_unsup
     40  u32  epochs_sup
     44  u32  rewire_period
     48  u32  n_replace
     52  u64  seed
     60  u64  Q3.12 saturation count
     68  u64  payload length in bytes
    payload
      u32[H][n_act + n_sil]       active then silent input indices per hidden HCU
      E[H][C][Mi][Mj]             input->hidden weights over stored pairs
      E[H][Mj]                    input->hidden biases
      E[H*Mj][K]                  hidden->output weights
      E[K]                        hidden->output biases
      f64[4]                      tau_p, alpha, beta, eps
    footer
      u32  CRC-32 of header + payload

E is float32 for fp32, binary16 bits for fp16 and int16 Q3.12 raw values for
mixed. Traces are not stored; an imported network carries prior traces.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .config import NetworkConfig, validate_config
from .errors import CrcMismatch, ParamBadMagic, ParamFileError, ParamTruncated, UnsupportedVersion
from .network import NetworkState, SparseConnectivity, build_network
from .precision import (
    PrecisionMode,
    Strictness,
    Tag,
    from_half,
    from_q312,
    q312_saturations,
    to_half,
    to_q312,
)

MAGIC = b"BCPN"
VERSION = 1
_HEADER_FIELDS = (
    "n_input_hcu",
    "input_mcu_per_hcu",
    "n_hidden_hcu",
    "hidden_mcu_per_hcu",
    "n_classes",
    "n_act",
    "n_sil",
    "epochs_unsup",
    "epochs_sup",
    "rewire_period",
    "n_replace",
)
HEADER = struct.Struct("<4sHBB" + "I" * len(_HEADER_FIELDS) + "QQQ")
FOOTER = struct.Struct("<I")
CONSTANTS = struct.Struct("<4d")
_STRICTNESS_CODE = {Strictness.STRICT: 0, Strictness.STORAGE: 1}
_ELEMENT_DTYPE = {Tag.FP32: np.dtype("<f4"), Tag.FP16: np.dtype("<u2"), Tag.MIXED: np.dtype("<i2")}


def _element_counts(cfg: NetworkConfig) -> tuple[int, int, int, int]:
    H, C = cfg.n_hidden_hcu, cfg.n_connections
    Mi, Mj, K = cfg.input_mcu_per_hcu, cfg.hidden_mcu_per_hcu, cfg.n_classes
    return H * C * Mi * Mj, H * Mj, H * Mj * K, K


def payload_size(cfg: NetworkConfig, mode: PrecisionMode) -> int:
    """Payload bytes for a configuration: indices, parameters and constants."""
    n_idx = cfg.n_hidden_hcu * cfg.n_connections
    n_par = sum(_element_counts(cfg))
    return 4 * n_idx + mode.element_bytes * n_par + CONSTANTS.size


def file_size(cfg: NetworkConfig, mode: PrecisionMode) -> int:
    return HEADER.size + payload_size(cfg, mode) + FOOTER.size


def _encode(values, mode: PrecisionMode) -> bytes:
    v = np.asarray(values, dtype=np.float64).ravel()
    if mode.tag == Tag.FP32:
        return v.astype("<f4").tobytes()
    if mode.tag == Tag.FP16:
        return np.asarray(to_half(v), dtype="<u2").tobytes()
    return np.asarray(to_q312(v), dtype="<i2").tobytes()


def _decode(buf: bytes, mode: PrecisionMode, shape) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=_ELEMENT_DTYPE[mode.tag])
    if mode.tag == Tag.FP32:
        out = raw.astype(np.float64)
    elif mode.tag == Tag.FP16:
        out = np.asarray(from_half(raw), dtype=np.float64)
    else:
        out = np.asarray(from_q312(raw), dtype=np.float64)
    return out.reshape(shape)


def encode_params(net: NetworkState, mode: PrecisionMode) -> bytes:
    """The complete file image for ``net`` stored in ``mode``."""
    cfg = net.config
    ih, ho = net.input_hidden, net.hidden_output
    saturations = 0
    if mode.tag == Tag.MIXED:
        if net.precision == mode:
            saturations = net.saturations
        else:
            saturations = sum(q312_saturations(a) for a in (ih.weights, ih.biases, ho.weights, ho.biases))
    idx = np.ascontiguousarray(ih.connectivity.slots, dtype="<u4").tobytes()
    payload = b"".join([
        idx,
        _encode(ih.weights, mode),
        _encode(ih.biases, mode),
        _encode(ho.weights, mode),
        _encode(ho.biases, mode),
        CONSTANTS.pack(cfg.tau_p, float(net.meta.get("alpha", 0.0)), cfg.beta, float(net.meta.get("eps", 1e-8))),
    ])
    header = HEADER.pack(
        MAGIC,
        VERSION,
        int(mode.tag),
        _STRICTNESS_CODE[mode.strictness],
        *(getattr(cfg, f) for f in _HEADER_FIELDS),
        cfg.seed,
        saturations,
        len(payload),
    )
    body = header + payload
    return body + FOOTER.pack(zlib.crc32(body))


def export_params(net: NetworkState, mode: PrecisionMode, path) -> None:
    """Write the parameter file atomically (temporary file, then rename)."""
    data = encode_params(net, mode)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _parse_header(data: bytes) -> dict:
    if len(data) < HEADER.size + FOOTER.size:
        raise ParamTruncated(f"parameter file truncated: {len(data)} bytes")
    fields = HEADER.unpack_from(data)
    magic, version, tag, strict = fields[:4]
    if magic != MAGIC:
        raise ParamBadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported parameter file version {version}")
    rest = fields[4:]
    out = dict(zip(_HEADER_FIELDS, rest[: len(_HEADER_FIELDS)]))
    out["seed"], out["saturations"], out["payload_bytes"] = rest[len(_HEADER_FIELDS):]
    out["version"] = version
    out["tag"] = tag
    out["strictness_code"] = strict
    return out


def _mode_from_header(h: dict) -> PrecisionMode:
    try:
        tag = Tag(h["tag"])
        strict = {0: Strictness.STRICT, 1: Strictness.STORAGE}[h["strictness_code"]]
    except (ValueError, KeyError):
        raise ParamFileError(f"unknown precision tag {h['tag']}/{h['strictness_code']}") from None
    return PrecisionMode(tag, strict)


def _checked(data: bytes) -> dict:
    h = _parse_header(data)
    end = HEADER.size + h["payload_bytes"]
    if len(data) < end + FOOTER.size:
        raise ParamTruncated(f"parameter file truncated: {len(data)} bytes, header declares {end + FOOTER.size}")
    # the footer is always the last four bytes, so the CRC check does not
    # depend on the (not yet trusted) declared payload length
    (stored,) = FOOTER.unpack_from(data, len(data) - FOOTER.size)
    actual = zlib.crc32(data[: len(data) - FOOTER.size])
    if stored != actual:
        raise CrcMismatch(f"CRC mismatch: stored 0x{stored:08x}, computed 0x{actual:08x}")
    if len(data) != end + FOOTER.size:
        raise ParamFileError(f"file is {len(data)} bytes, header declares {end + FOOTER.size}")
    return h


def decode_params(data: bytes) -> NetworkState:
    h = _checked(data)
    mode = _mode_from_header(h)
    body = data[HEADER.size: HEADER.size + h["payload_bytes"]]
    tau_p, alpha, beta, eps = CONSTANTS.unpack_from(body, len(body) - CONSTANTS.size)
    cfg = NetworkConfig(
        **{f: h[f] for f in _HEADER_FIELDS},
        tau_p=tau_p,
        beta=beta,
        seed=h["seed"],
        precision=mode,
    )
    problems = validate_config(cfg)
    if problems:
        raise ParamFileError("invalid configuration in header: " + "; ".join(problems))
    if len(body) != payload_size(cfg, mode):
        raise ParamFileError(f"payload is {len(body)} bytes, configuration needs {payload_size(cfg, mode)}")

    H, C = cfg.n_hidden_hcu, cfg.n_connections
    Mi, Mj, K = cfg.input_mcu_per_hcu, cfg.hidden_mcu_per_hcu, cfg.n_classes
    eb = mode.element_bytes
    pos = 0

    def take(nbytes):
        nonlocal pos
        chunk = body[pos: pos + nbytes]
        pos += nbytes
        return chunk

    slots = np.frombuffer(take(4 * H * C), dtype="<u4").astype(np.int64).reshape(H, C)
    n_w, n_b, n_wo, n_bo = _element_counts(cfg)
    w = _decode(take(eb * n_w), mode, (H, C, Mi, Mj))
    b = _decode(take(eb * n_b), mode, (H, Mj))
    wo = _decode(take(eb * n_wo), mode, (H * Mj, K))
    bo = _decode(take(eb * n_bo), mode, (K,))

    conn = SparseConnectivity(slots[:, : cfg.n_act].copy(), slots[:, cfg.n_act:].copy())
    problems = conn.violations(cfg.n_input_hcu, cfg.n_act, cfg.n_sil)
    if problems:
        raise ParamFileError("invalid connectivity: " + "; ".join(problems))

    net = build_network(cfg)
    net.input_hidden.connectivity = conn
    net.input_hidden.weights = w
    net.input_hidden.biases = b
    net.hidden_output.weights = wo
    net.hidden_output.biases = bo
    net.precision = mode
    net.saturations = int(h["saturations"])
    net.meta.update(alpha=alpha, eps=eps)
    return net


def import_params(path) -> NetworkState:
    """Load a parameter file. The CRC is verified before any field is used."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ParamFileError(f"model file not found: {path}") from None
    return decode_params(data)


def inspect(path) -> dict:
    """Header fields, precision, sizes and CRC status of a parameter file."""
    data = Path(path).read_bytes()
    h = _parse_header(data)
    info = dict(h)
    info["precision"] = str(_mode_from_header(h))
    info["file_bytes"] = len(data)
    end = HEADER.size + h["payload_bytes"]
    if len(data) == end + FOOTER.size:
        (stored,) = FOOTER.unpack_from(data, end)
        info["crc"] = f"0x{stored:08x}"
        info["crc_ok"] = stored == zlib.crc32(data[:end])
    else:
        info["crc"] = None
        info["crc_ok"] = False
    info.pop("tag")
    info.pop("strictness_code")
    return info


def roundtrip(net: NetworkState, mode: PrecisionMode) -> NetworkState:
    """Export to memory and import again."""
    return decode_params(encode_params(net, mode))


__all__ = [
    "export_params",
    "import_params",
    "inspect",
    "encode_params",
    "decode_params",
    "payload_size",
    "file_size",
]
