"""Behavioral model of an M-channel time-interleaved ADC.

Each channel applies, in order: a Chebyshev-I memory filter (analog
front-end mismatch), a tanh soft-compression nonlinearity, sampling at
skew/jitter-perturbed instants, and a midtread saturating quantizer.
Channel m produces aggregate output indices k = n*M + m. The ideal
reference path samples the unfiltered, linear waveform on the exact
time grid and quantizes it with the same quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sp_signal

from adccal.signals import WaveformRecord

INTERP_HALF_WIDTH = 32
INTERP_KAISER_BETA = 12.0
JITTER_FILTER_ORDER = 4
_JITTER_WARMUP = 8192


class AdcParameterError(ValueError):
    """Rejected ADC model parameter."""


class AdcInputError(ValueError):
    """Rejected input to an ADC model operation."""


@dataclass
class ChannelImpairments:
    """Per-channel error sources; None disables a block entirely."""

    skew: float = 0.0
    jitter_rms: float = 390e-15
    jitter_bandwidth: float = 20e6
    nonlinearity_scale: float | None = None  # A in y = A*tanh(x/A); None = linear
    filter_ripple_db: float | None = None    # None = all-pass (no memory effect)
    filter_corner_hz: float | None = None
    filter_order: int = 8

    def __post_init__(self):
        if self.nonlinearity_scale is not None and self.nonlinearity_scale <= 0:
            raise AdcParameterError("nonlinearity scale must be positive")
        if (self.filter_ripple_db is None) != (self.filter_corner_hz is None):
            raise AdcParameterError("ripple and corner must be set together")


@dataclass
class AdcConfig:
    n_channels: int = 8
    channel_rate: float = 1.024e9
    resolution_bits: int = 13
    full_scale: float = 1.0  # volts peak-to-peak
    channels: list[ChannelImpairments] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.resolution_bits < 2:
            raise AdcParameterError("resolution must be at least 2 bits")
        if self.full_scale <= 0 or self.channel_rate <= 0 or self.n_channels < 1:
            raise AdcParameterError("full scale, channel rate, channel count must be positive")
        if self.channels and len(self.channels) != self.n_channels:
            raise AdcParameterError("channel list length must match n_channels")

    @property
    def aggregate_rate(self) -> float:
        return self.n_channels * self.channel_rate

    @property
    def lsb(self) -> float:
        return self.full_scale / (1 << self.resolution_bits)

    @property
    def code_scale(self) -> float:
        """Normalization constant: codes / code_scale lies in [-1, 1)."""
        return float(1 << (self.resolution_bits - 1))


def default_adc_config(
    seed: int = 0,
    *,
    n_channels: int = 8,
    channel_rate: float = 1.024e9,
    resolution_bits: int = 13,
    full_scale: float = 1.0,
    skew_spread: float = 12e-12,
    jitter_rms: float = 390e-15,
    jitter_bandwidth: float = 20e6,
    ripple_db_range: tuple[float, float] = (1.5, 6.0),
    corner_hz_range: tuple[float, float] = (5e9, 8e9),
    filter_order: int = 8,
    nonlin_scale_range: tuple[float, float] = (1.5, 2.5),
) -> AdcConfig:
    """Draw the per-channel impairment parameters from the given seed.

    Skews are uniform, then recentred and rescaled so max - min equals
    ``skew_spread`` exactly. The tanh scale is drawn in units of the
    half full-scale voltage.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xADC])))
    u = rng.uniform(0.0, 1.0, size=n_channels)
    centered = u - u.mean()
    span = centered.max() - centered.min()
    if span == 0.0:
        raise AdcParameterError("degenerate skew draw")
    skews = centered * (skew_spread / span)
    ripples = rng.uniform(*ripple_db_range, size=n_channels)
    corners = rng.uniform(*corner_hz_range, size=n_channels)
    scales = rng.uniform(*nonlin_scale_range, size=n_channels) * (full_scale / 2.0)
    channels = [
        ChannelImpairments(
            skew=float(skews[m]),
            jitter_rms=jitter_rms,
            jitter_bandwidth=jitter_bandwidth,
            nonlinearity_scale=float(scales[m]),
            filter_ripple_db=float(ripples[m]),
            filter_corner_hz=float(corners[m]),
            filter_order=filter_order,
        )
        for m in range(n_channels)
    ]
    return AdcConfig(
        n_channels=n_channels,
        channel_rate=channel_rate,
        resolution_bits=resolution_bits,
        full_scale=full_scale,
        channels=channels,
        seed=seed,
    )


def ideal_adc_config(seed: int = 0, **kwargs) -> AdcConfig:
    """All impairments disabled: useful for reference paths and tests."""
    cfg = default_adc_config(seed, **kwargs)
    cfg.channels = [
        ChannelImpairments(skew=0.0, jitter_rms=0.0)
        for _ in range(cfg.n_channels)
    ]
    return cfg


def design_chebyshev1(
    order: int, ripple_db: float, corner_hz: float, sim_rate: float
) -> np.ndarray:
    """Chebyshev Type I low-pass as second-order sections.

    Discretized by the bilinear transform with frequency pre-warping at the
    corner, so the discrete magnitude at ``corner_hz`` is exactly -ripple dB.
    """
    if order < 1:
        raise AdcParameterError("filter order must be >= 1")
    if ripple_db <= 0:
        raise AdcParameterError("ripple must be positive")
    if not 0 < corner_hz < sim_rate / 2:
        raise AdcParameterError(
            f"corner {corner_hz:g} Hz must lie inside (0, {sim_rate / 2:g}) Hz"
        )
    sos = sp_signal.cheby1(order, ripple_db, corner_hz, fs=sim_rate, output="sos")
    _, poles, _ = sp_signal.sos2zpk(sos)
    if np.max(np.abs(poles)) >= 1.0 - 1e-9:
        raise AdcParameterError("designed filter is not safely stable")
    return sos


def gen_timing_offsets(cfg: AdcConfig, n_channel_samples: int, seed: int) -> np.ndarray:
    """Per-channel sampling-time errors: static skew plus band-limited jitter.

    Jitter is white Gaussian at the channel rate, shaped by a Butterworth
    low-pass of order ``JITTER_FILTER_ORDER`` at the -3 dB bandwidth, then
    rescaled to the exact target RMS. Fully reproducible from the seed.
    """
    if n_channel_samples < 1:
        raise AdcInputError("need at least one sample per channel")
    out = np.empty((cfg.n_channels, n_channel_samples))
    channels = cfg.channels or [ChannelImpairments() for _ in range(cfg.n_channels)]
    for m, ch in enumerate(channels):
        out[m] = ch.skew
        if ch.jitter_rms > 0:
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([seed, 0x7177E4, m]))
            )
            white = rng.standard_normal(n_channel_samples + _JITTER_WARMUP)
            sos = sp_signal.butter(
                JITTER_FILTER_ORDER,
                ch.jitter_bandwidth,
                fs=cfg.channel_rate,
                output="sos",
            )
            shaped = sp_signal.sosfilt(sos, white)[_JITTER_WARMUP:]
            rms = np.sqrt(np.mean(shaped**2))
            out[m] += shaped * (ch.jitter_rms / rms)
    return out


def _interp_core(samples: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Windowed-sinc interpolation at fractional sample positions.

    Kaiser-windowed sinc, ``INTERP_HALF_WIDTH`` taps per side, with per-point
    weight normalization so constants are reproduced exactly.
    """
    half = INTERP_HALF_WIDTH
    n0 = np.floor(positions).astype(np.int64)
    taps = np.arange(-half + 1, half + 1)
    idx = n0[:, None] + taps[None, :]
    u = positions[:, None] - idx
    x = u / half
    w = np.sinc(u) * (np.i0(INTERP_KAISER_BETA * np.sqrt(np.maximum(0.0, 1.0 - x * x)))
                      / np.i0(INTERP_KAISER_BETA))
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("ij,ij->i", samples[idx], w)


def sample_nonuniform(
    samples: np.ndarray,
    sample_rate: float,
    times: np.ndarray,
    *,
    chunk: int = 65536,
) -> np.ndarray:
    """Band-limited resampling of a uniformly sampled waveform at arbitrary times."""
    x = np.asarray(samples, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    p = t * sample_rate
    half = INTERP_HALF_WIDTH
    if t.size:
        lo, hi = p.min(), p.max()
        if lo < half - 1 or hi > x.size - half - 1:
            raise AdcInputError(
                "requested times fall outside the interpolation-safe span "
                f"[{(half - 1) / sample_rate:g}, {(x.size - half - 1) / sample_rate:g}] s"
            )
    out = np.empty(t.size)
    for s in range(0, t.size, chunk):
        out[s : s + chunk] = _interp_core(x, p[s : s + chunk])
    return out


def apply_nonlinearity(x: np.ndarray, scale: float | None) -> np.ndarray:
    """Odd soft-compression y = A*tanh(x/A); identity when scale is None."""
    if scale is None:
        return np.asarray(x, dtype=np.float64).copy()
    if scale <= 0:
        raise AdcParameterError("nonlinearity scale must be positive")
    return scale * np.tanh(np.asarray(x, dtype=np.float64) / scale)


def quantize(x: np.ndarray, bits: int, v_fs: float) -> np.ndarray:
    """Midtread quantizer: round half away from zero, saturate at the rails."""
    if bits < 2:
        raise AdcParameterError("need at least 2 bits")
    lsb = v_fs / (1 << bits)
    q = np.asarray(x, dtype=np.float64) / lsb
    codes = np.sign(q) * np.floor(np.abs(q) + 0.5)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return np.clip(codes, lo, hi).astype(np.int32)


def count_clips(x: np.ndarray, bits: int, v_fs: float) -> int:
    lsb = v_fs / (1 << bits)
    q = np.abs(np.asarray(x, dtype=np.float64) / lsb)
    hi = (1 << (bits - 1)) - 1
    return int(np.count_nonzero(np.floor(q + 0.5) > hi))


@dataclass
class AdcCapture:
    """Paired non-ideal / ideal conversions of one record at the aggregate rate."""

    nonideal_codes: np.ndarray  # int16
    ideal_codes: np.ndarray     # int16
    config: AdcConfig
    source_seed: int = 0
    source_order: int = 0
    source_record: str = ""
    clip_nonideal: int = 0
    clip_ideal: int = 0

    def __len__(self) -> int:
        return len(self.nonideal_codes)

    @property
    def nonideal_normalized(self) -> np.ndarray:
        return self.nonideal_codes.astype(np.float64) / self.config.code_scale

    @property
    def ideal_normalized(self) -> np.ndarray:
        return self.ideal_codes.astype(np.float64) / self.config.code_scale


def simulate_interleaved(record: WaveformRecord, cfg: AdcConfig) -> AdcCapture:
    """Run one record through the interleaved converter model.

    The record's sample rate must be an integer multiple of the aggregate
    rate. Deterministic given (record, cfg, cfg.seed).
    """
    ratio = record.sample_rate / cfg.aggregate_rate
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
        raise AdcInputError(
            "record rate must be an integer multiple of the aggregate ADC rate"
        )
    r = int(round(ratio))
    x = np.asarray(record.samples, dtype=np.float64)
    n_agg = x.size // r
    m_ch = cfg.n_channels
    bits = cfg.resolution_bits
    channels = cfg.channels or [ChannelImpairments() for _ in range(m_ch)]

    ideal_v = x[: n_agg * r : r]
    ideal_codes = quantize(ideal_v, bits, cfg.full_scale)
    clip_ideal = count_clips(ideal_v, bits, cfg.full_scale)

    n_max = -(-n_agg // m_ch)  # ceil
    # fresh jitter realization per record; static skew stays in cfg
    offset_seed = int(np.random.SeedSequence([cfg.seed, record.seed]).generate_state(1)[0])
    offsets = gen_timing_offsets(cfg, n_max, offset_seed)

    pad = 2 * INTERP_HALF_WIDTH
    nonideal = np.empty(n_agg, dtype=np.int16)
    clip_nonideal = 0
    for m, ch in enumerate(channels):
        y = x
        if ch.filter_ripple_db is not None:
            sos = design_chebyshev1(
                ch.filter_order, ch.filter_ripple_db, ch.filter_corner_hz,
                record.sample_rate,
            )
            y = sp_signal.sosfilt(sos, y)
        y = apply_nonlinearity(y, ch.nonlinearity_scale)
        k = np.arange(m, n_agg, m_ch)
        t = k / cfg.aggregate_rate + offsets[m, : k.size]
        yp = np.concatenate([np.zeros(pad), y, np.zeros(pad)])
        p = t * record.sample_rate + pad
        v = np.empty(k.size)
        chunk = 65536
        for s in range(0, k.size, chunk):
            v[s : s + chunk] = _interp_core(yp, p[s : s + chunk])
        nonideal[k] = quantize(v, bits, cfg.full_scale).astype(np.int16)
        clip_nonideal += count_clips(v, bits, cfg.full_scale)

    return AdcCapture(
        nonideal_codes=nonideal,
        ideal_codes=ideal_codes.astype(np.int16),
        config=cfg,
        source_seed=record.seed,
        source_order=record.constellation_order,
        clip_nonideal=clip_nonideal,
        clip_ideal=clip_ideal,
    )
