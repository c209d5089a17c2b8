"""Run configuration: INI-style ``key = value`` sections with strict keys.

Every field defaults to the experiment's nominal parameters (13-bit 8-channel
converter at 1.024 GS/s per channel, 12 ps skew spread, 390 fs / 20 MHz
jitter, order-8 Chebyshev memory filters with 1.5-6 dB ripple and 5-8 GHz
corners, 128 x 8 MHz OFDM at 1.3 GHz). Unknown sections or keys are errors,
not warnings.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, bad type, or invalid value in a run configuration."""


def _parse_int_list(text: str) -> tuple[int, ...]:
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    return tuple(int(t) for t in items)


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunSection:
    out_dir: str = "runs"


@dataclass
class OfdmSection:
    n_subcarriers: int = 128
    subcarrier_spacing_hz: float = 8e6
    center_frequency_hz: float = 1.3e9
    analog_rate_hz: float = 65.536e9
    cyclic_prefix_samples: int = 0


@dataclass
class AdcSection:
    n_channels: int = 8
    channel_rate_hz: float = 1.024e9
    resolution_bits: int = 13
    full_scale_v: float = 1.0
    seed: int = 7
    skew_spread_s: float = 12e-12
    jitter_rms_s: float = 390e-15
    jitter_bandwidth_hz: float = 20e6
    ripple_db_min: float = 1.5
    ripple_db_max: float = 6.0
    corner_hz_min: float = 5e9
    corner_hz_max: float = 8e9
    filter_order: int = 8
    nonlin_scale_min: float = 1.5
    nonlin_scale_max: float = 2.5


@dataclass
class SignalSection:
    constellations: tuple = (64, 128, 256, 512, 1024)
    train_symbols: int = 200
    eval_symbols: int = 80
    seed: int = 1
    peak_fraction: float = 0.95


@dataclass
class WindowSection:
    window_length: int = 64
    current_index: int = 31
    stride: int = 1


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    optimizer: str = "adam"
    seed: int = 0
    val_fraction: float = 0.1


@dataclass
class QuantSection:
    weight_bits: int = 16
    activation_bits: int = 16
    bit_list: tuple = (16, 12, 10, 8)
    lut_size: int = 256
    calib_windows: int = 4096


@dataclass
class EvalSection:
    edge_exclude: int = 128
    rbw_hz: float = 1e6
    overlay_symbols: int = 2


_CONVERTERS = {
    int: int,
    float: float,
    str: str,
    tuple: _parse_int_list,
    bool: _parse_bool,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    ofdm: OfdmSection = field(default_factory=OfdmSection)
    adc: AdcSection = field(default_factory=AdcSection)
    signal: SignalSection = field(default_factory=SignalSection)
    window: WindowSection = field(default_factory=WindowSection)
    train: TrainSection = field(default_factory=TrainSection)
    quant: QuantSection = field(default_factory=QuantSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        if self.signal.train_symbols < 1 or self.signal.eval_symbols < 1:
            raise ConfigError("symbol counts must be at least 1")
        if not self.signal.constellations:
            raise ConfigError("need at least one constellation")
        if not 0 <= self.window.current_index < self.window.window_length:
            raise ConfigError("current_index must lie inside the window")
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if not 0.0 <= self.train.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.train.optimizer}'")
        if not self.quant.bit_list:
            raise ConfigError("quant bit_list must not be empty")
        return self


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a config file; a missing path yields pure defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg.validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section_name in parser.sections():
        if section_name not in sections:
            raise ConfigError(f"unknown config section [{section_name}]")
        target = sections[section_name]
        known = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section_name):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section_name}]")
            current = getattr(target, key)
            conv = _CONVERTERS[type(current)]
            try:
                setattr(target, key, conv(raw))
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"bad value for {section_name}.{key}: {raw!r}") from exc
    return cfg.validate()
