"""Network configuration, validation and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .precision import FP32, PrecisionMode


@dataclass
class NetworkConfig:
    n_input_hcu: int = 784
    input_mcu_per_hcu: int = 2
    n_hidden_hcu: int = 32
    hidden_mcu_per_hcu: int = 128
    n_classes: int = 10
    n_act: int = 64
    n_sil: int = 64
    tau_p: float = 3.0
    epochs_unsup: int = 5
    epochs_sup: int = 5
    beta: float = 1.0
    # 0 selects the default schedule: ceil(n_train / 4) samples
    rewire_period: int = 0
    # 0 selects max(1, n_sil // 2)
    n_replace: int = 0
    precision: PrecisionMode = field(default_factory=lambda: FP32)
    seed: int = 0
    # learning-rule knobs for the unsupervised phase
    unsup_bias_gain: float = -3.0
    warmup: float = 50.0
    init_noise: float = 0.1

    @property
    def n_connections(self) -> int:
        return self.n_act + self.n_sil

    @property
    def n_hidden_units(self) -> int:
        return self.n_hidden_hcu * self.hidden_mcu_per_hcu

    def resolved_rewire_period(self, n_train: int) -> int:
        return self.rewire_period or max(1, math.ceil(n_train / 4))

    def resolved_n_replace(self) -> int:
        if self.n_replace:
            return self.n_replace
        return max(1, self.n_sil // 2) if self.n_sil > 0 else 0

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)


_COUNT_FIELDS = (
    "n_input_hcu",
    "input_mcu_per_hcu",
    "n_hidden_hcu",
    "hidden_mcu_per_hcu",
    "n_classes",
)


def validate_config(config: NetworkConfig) -> list[str]:
    """Every violated invariant of ``config``; empty when valid."""
    v = []
    for name in _COUNT_FIELDS:
        if getattr(config, name) < 1:
            v.append(f"{name} must be >= 1")
    if config.input_mcu_per_hcu != 2:
        v.append("input_mcu_per_hcu must be 2 (complementary coding)")
    if config.n_act < 1:
        v.append("n_act must be >= 1")
    if config.n_sil < 0:
        v.append("n_sil must be >= 0")
    if config.n_act + config.n_sil > config.n_input_hcu:
        v.append("n_act+n_sil exceeds n_input_hcu")
    if not config.tau_p > 0:
        v.append("tau_p must be positive")
    if not config.beta > 0:
        v.append("beta must be positive")
    if config.epochs_unsup < 0:
        v.append("epochs_unsup must be >= 0")
    if config.epochs_sup < 0:
        v.append("epochs_sup must be >= 0")
    if config.rewire_period < 0:
        v.append("rewire_period must be >= 1 (or 0 for the default schedule)")
    if config.n_replace < 0:
        v.append("n_replace must be >= 0")
    elif config.n_replace > config.n_sil:
        v.append("n_replace exceeds n_sil")
    if config.warmup < 0:
        v.append("warmup must be >= 0")
    if config.init_noise < 0:
        v.append("init_noise must be >= 0")
    if not 0 <= config.seed < 2**64:
        v.append("seed must be a 64-bit unsigned integer")
    return v


def check_config(config: NetworkConfig) -> NetworkConfig:
    violations = validate_config(config)
    if violations:
        raise ConfigError(violations)
    return config


# ---------------------------------------------------------------- presets


def mnist_config(**overrides) -> NetworkConfig:
    return NetworkConfig(**overrides)


def pneumonia_config(hcu=30, mcu=400, n_act=320, n_sil=80, **overrides) -> NetworkConfig:
    base = dict(
        n_input_hcu=64 * 64,
        n_hidden_hcu=hcu,
        hidden_mcu_per_hcu=mcu,
        n_classes=2,
        n_act=n_act,
        n_sil=n_sil,
        tau_p=0.3,
        epochs_unsup=5,
        epochs_sup=5,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def breast_config(**overrides) -> NetworkConfig:
    base = dict(
        n_input_hcu=128 * 128,
        n_hidden_hcu=10,
        hidden_mcu_per_hcu=1000,
        n_classes=2,
        n_act=676,
        n_sil=156,
        tau_p=0.2,
        epochs_unsup=15,
        epochs_sup=15,
    )
    base.update(overrides)
    return NetworkConfig(**base)


# ---------------------------------------------------------------- file format


def _parse_value(name: str, raw: str, ftype):
    if name == "precision":
        tag, _, strict = raw.partition("/")
        return PrecisionMode.parse(tag.strip(), strict.strip() or "strict")
    if ftype in ("int", int):
        return int(raw, 0)
    if ftype in ("float", float):
        return float(raw)
    raise TypeError(f"no parser for field {name}")


def parse_config(text: str) -> NetworkConfig:
    """Parse ``key = value`` lines. Unknown keys and bad values are errors."""
    fields = {f.name: f for f in dataclasses.fields(NetworkConfig)}
    values = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            problems.append(f"line {lineno}: expected 'key = value'")
        elif key not in fields:
            problems.append(f"line {lineno}: unknown key {key!r}")
        else:
            try:
                values[key] = _parse_value(key, raw, fields[key].type)
            except (ValueError, TypeError) as exc:
                problems.append(f"line {lineno}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return NetworkConfig(**values)


def load_config(path) -> NetworkConfig:
    return parse_config(Path(path).read_text())


def format_config(config: NetworkConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
