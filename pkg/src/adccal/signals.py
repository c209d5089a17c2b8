"""QAM constellations, OFDM passband modulation/demodulation, and PAPR.

Conventions used throughout:

* Subcarrier k of a block sits at ``center_frequency + (k - (K-1)/2) * spacing``
  so the occupied band is symmetric about the carrier and no subcarrier
  falls on the carrier itself (K even).
* The complex envelope of one OFDM symbol is scaled by 1/sqrt(K), which makes
  the mean envelope power equal to the mean symbol power (Parseval).
* Passband records are real-valued and scaled so their peak hits a target
  amplitude (default 0.95 of a 1 Vp-p converter's half range).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QAM_ORDERS = (64, 128, 256, 512, 1024)

# cross-shaped grids for the odd-bit orders: (grid side, corner cut side)
_CROSS_LAYOUT = {32: (6, 1), 128: (12, 2), 512: (24, 4)}


class SignalError(ValueError):
    """Rejected input for a signal-chain operation."""


def _gray_decode(code: np.ndarray) -> np.ndarray:
    """Invert the binary reflected Gray code (vectorized prefix XOR)."""
    out = np.asarray(code).copy()
    shift = 1
    while True:
        folded = out >> shift
        if not folded.any():
            return out
        out ^= folded
        shift *= 2


def _square_points(order: int) -> np.ndarray:
    bits = order.bit_length() - 1
    side = 1 << (bits // 2)
    idx = np.arange(order)
    i_pos = _gray_decode(idx >> (bits // 2))
    q_pos = _gray_decode(idx & (side - 1))
    levels_i = 2 * i_pos - (side - 1)
    levels_q = 2 * q_pos - (side - 1)
    return levels_i.astype(float) + 1j * levels_q.astype(float)


def _cross_points(order: int) -> np.ndarray:
    side, cut = _CROSS_LAYOUT[order]
    pts = []
    for row in range(side):
        for col in range(side):
            corner_row = row < cut or row >= side - cut
            corner_col = col < cut or col >= side - cut
            if corner_row and corner_col:
                continue
            pts.append((2 * col - (side - 1)) + 1j * (2 * row - (side - 1)))
    return np.array(pts)


@dataclass(frozen=True)
class QamConstellation:
    """A unit-average-energy QAM constellation with an index <-> point map."""

    order: int
    points: np.ndarray

    @classmethod
    def from_order(cls, order: int) -> "QamConstellation":
        if order not in QAM_ORDERS:
            raise SignalError(f"unsupported QAM order {order}")
        bits = order.bit_length() - 1
        raw = _square_points(order) if bits % 2 == 0 else _cross_points(order)
        pts = raw / np.sqrt(np.mean(np.abs(raw) ** 2))
        pts.setflags(write=False)
        return cls(order=order, points=pts)

    @property
    def min_distance(self) -> float:
        d = np.abs(self.points[:, None] - self.points[None, :])
        np.fill_diagonal(d, np.inf)
        return float(d.min())


def qam_map(indices: np.ndarray, constellation: QamConstellation) -> np.ndarray:
    """Map integer symbol indices to complex constellation points."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= constellation.order):
        raise SignalError(
            f"symbol index out of range [0, {constellation.order}) "
            f"(min {idx.min()}, max {idx.max()})"
        )
    return constellation.points[idx]


def qam_slice(estimates: np.ndarray, constellation: QamConstellation) -> np.ndarray:
    """Nearest-point hard decisions; ties resolve to the lower index."""
    est = np.asarray(estimates, dtype=complex).ravel()
    out = np.empty(est.size, dtype=np.int32)
    pts = constellation.points
    chunk = max(1, (1 << 22) // max(1, pts.size))
    for lo in range(0, est.size, chunk):
        block = est[lo : lo + chunk]
        d2 = np.abs(block[:, None] - pts[None, :]) ** 2
        out[lo : lo + block.size] = np.argmin(d2, axis=1)
    return out


@dataclass(frozen=True)
class OfdmConfig:
    """OFDM numerology and the analog-simulation sample rate."""

    n_subcarriers: int = 128
    subcarrier_spacing: float = 8e6
    center_frequency: float = 1.3e9
    analog_rate: float = 65.536e9
    cyclic_prefix_samples: int = 0

    def __post_init__(self):
        if self.n_subcarriers < 1 or self.subcarrier_spacing <= 0:
            raise SignalError("need n_subcarriers >= 1 and positive spacing")
        if self.cyclic_prefix_samples < 0:
            raise SignalError("cyclic prefix length must be >= 0")
        n = self.analog_rate / self.subcarrier_spacing
        if abs(n - round(n)) > 1e-6:
            raise SignalError("analog_rate must be an integer multiple of the spacing")
        if self.center_frequency + self.bandwidth / 2 >= self.analog_rate / 2:
            raise SignalError("occupied band exceeds the simulation Nyquist")

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def symbol_period(self) -> float:
        return 1.0 / self.subcarrier_spacing

    def samples_per_symbol(self, sample_rate: float | None = None) -> int:
        rate = self.analog_rate if sample_rate is None else sample_rate
        n = rate / self.subcarrier_spacing
        if abs(n - round(n)) > 1e-6:
            raise SignalError(
                f"sample rate {rate} is not an integer number of samples per symbol"
            )
        return int(round(n))

    def subcarrier_offsets(self) -> np.ndarray:
        k = np.arange(self.n_subcarriers)
        return (k - (self.n_subcarriers - 1) / 2.0) * self.subcarrier_spacing


@dataclass
class WaveformRecord:
    """A sampled waveform plus the transmit data that produced it.

    ``samples`` is float32 passband (real) by convention; the transmit
    indices are kept per OFDM symbol so receivers can score SER.
    """

    samples: np.ndarray
    sample_rate: float
    tx_indices: np.ndarray  # shape [n_symbols, n_subcarriers], int32
    constellation_order: int
    seed: int
    n_subcarriers: int = 128

    @property
    def n_symbols(self) -> int:
        return 0 if self.tx_indices.size == 0 else self.tx_indices.shape[0]

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def ofdm_envelope(symbols: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    """Complex baseband envelope of the symbol stream, one block per symbol.

    Implemented as a zero-stuffed IFFT shifted by half a subcarrier when the
    subcarrier count is even, so the band is symmetric about 0 Hz.
    """
    sym = np.asarray(symbols, dtype=complex).ravel()
    K = cfg.n_subcarriers
    if sym.size == 0 or sym.size % K:
        raise SignalError(f"symbol count {sym.size} is not a multiple of {K}")
    blocks = sym.reshape(-1, K)
    N = cfg.samples_per_symbol()
    if N < K:
        raise SignalError("analog rate too low for the subcarrier count")
    spec = np.zeros((blocks.shape[0], N), dtype=complex)
    bins = (np.arange(K) - K // 2) % N
    spec[:, bins] = blocks
    env = np.fft.ifft(spec, axis=1) * (N / np.sqrt(K))
    if K % 2 == 0:
        env *= np.exp(1j * np.pi * np.arange(N) / N)[None, :]
    if cfg.cyclic_prefix_samples:
        cp = cfg.cyclic_prefix_samples
        env = np.concatenate([env[:, -cp:], env], axis=1)
    return env.ravel()


def _upconvert(envelope: np.ndarray, cfg: OfdmConfig) -> np.ndarray:
    n = np.arange(envelope.size)
    carrier = np.exp(2j * np.pi * cfg.center_frequency / cfg.analog_rate * n)
    return np.real(envelope * carrier)


def ofdm_modulate(
    symbols: np.ndarray,
    cfg: OfdmConfig,
    seed: int = 0,
    *,
    peak_amplitude: float = 0.475,
    constellation_order: int = 0,
    tx_indices: np.ndarray | None = None,
) -> WaveformRecord:
    """Modulate symbols to a real passband record scaled to ``peak_amplitude``."""
    env = ofdm_envelope(symbols, cfg)
    x = _upconvert(env, cfg)
    peak = np.max(np.abs(x))
    if peak == 0.0:
        raise SignalError("cannot scale an identically zero waveform")
    x = x * (peak_amplitude / peak)
    if tx_indices is None:
        tx_indices = np.zeros((0, cfg.n_subcarriers), dtype=np.int32)
    return WaveformRecord(
        samples=x.astype(np.float32),
        sample_rate=cfg.analog_rate,
        tx_indices=np.asarray(tx_indices, dtype=np.int32).reshape(-1, cfg.n_subcarriers),
        constellation_order=constellation_order,
        seed=seed,
        n_subcarriers=cfg.n_subcarriers,
    )


def generate_record(
    order: int,
    n_symbols: int,
    cfg: OfdmConfig,
    seed: int,
    *,
    peak_amplitude: float = 0.475,
) -> WaveformRecord:
    """Draw random QAM data and modulate it into a passband record."""
    if n_symbols < 1:
        raise SignalError("need at least one OFDM symbol")
    const = QamConstellation.from_order(order)
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, order, size=(n_symbols, cfg.n_subcarriers))
    rec = ofdm_modulate(
        qam_map(idx.ravel(), const),
        cfg,
        seed,
        peak_amplitude=peak_amplitude,
        constellation_order=order,
        tx_indices=idx,
    )
    return rec


def _image_needs_filter(cfg: OfdmConfig) -> bool:
    # the per-symbol DFT nulls the 2*fc image exactly when 2*fc is an
    # integer number of subcarrier spacings; otherwise low-pass first
    ratio = 2.0 * cfg.center_frequency / cfg.subcarrier_spacing
    return abs(ratio - round(ratio)) > 1e-9


def _lowpass_brickwall(x: np.ndarray, sample_rate: float, cutoff: float) -> np.ndarray:
    spec = np.fft.fft(x)
    freqs = np.fft.fftfreq(x.size, d=1.0 / sample_rate)
    spec[np.abs(freqs) > cutoff] = 0.0
    return np.fft.ifft(spec)


def ofdm_demodulate(
    record: WaveformRecord | np.ndarray,
    cfg: OfdmConfig,
    sample_rate: float | None = None,
) -> np.ndarray:
    """Recover complex symbol estimates from a real passband waveform.

    Works at the analog-simulation rate or any lower rate with an integer
    number of samples per symbol (e.g. the aggregate ADC rate). Returns the
    raw estimates; scale normalization is up to the caller.
    """
    if isinstance(record, WaveformRecord):
        samples = record.samples
        rate = record.sample_rate
    else:
        samples = np.asarray(record)
        if sample_rate is None:
            raise SignalError("sample_rate required when passing a bare array")
        rate = sample_rate
    if cfg.center_frequency >= rate / 2:
        raise SignalError("carrier at or above Nyquist for this sample rate")
    N = cfg.samples_per_symbol(rate)
    cp = int(round(cfg.cyclic_prefix_samples * rate / cfg.analog_rate))
    span = N + cp
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0 or x.size % span:
        raise SignalError(
            f"record length {x.size} is not an integer number of OFDM symbols ({span})"
        )
    n = np.arange(x.size)
    y = 2.0 * x * np.exp(-2j * np.pi * cfg.center_frequency / rate * n)
    if _image_needs_filter(cfg):
        y = _lowpass_brickwall(y, rate, cfg.center_frequency)
    blocks = y.reshape(-1, span)[:, cp:]
    K = cfg.n_subcarriers
    if K % 2 == 0:
        blocks = blocks * np.exp(-1j * np.pi * np.arange(N) / N)[None, :]
    spec = np.fft.fft(blocks, axis=1)
    bins = (np.arange(K) - K // 2) % N
    return (spec[:, bins] * (np.sqrt(K) / N)).ravel()


def normalize_power(estimates: np.ndarray) -> np.ndarray:
    """Rescale symbol estimates to unit average power (receiver-side AGC)."""
    est = np.asarray(estimates, dtype=complex)
    p = np.mean(np.abs(est) ** 2)
    if p == 0.0:
        return est
    return est / np.sqrt(p)


def papr_per_symbol_db(envelope: np.ndarray, samples_per_symbol: int) -> np.ndarray:
    """Peak-to-average power ratio of each OFDM symbol's complex envelope."""
    env = np.asarray(envelope)
    if env.size == 0 or env.size % samples_per_symbol:
        raise SignalError("envelope is not an integer number of symbols")
    blocks = np.abs(env.reshape(-1, samples_per_symbol)) ** 2
    mean = blocks.mean(axis=1)
    if np.any(mean == 0.0):
        raise SignalError("PAPR undefined for a zero-power symbol")
    return 10.0 * np.log10(blocks.max(axis=1) / mean)


def papr_db(record: WaveformRecord, cfg: OfdmConfig) -> np.ndarray:
    """Per-symbol PAPR of a record's complex envelope.

    When the record carries its transmit indices the envelope is rebuilt
    exactly from them; otherwise it is recovered by downconversion.
    """
    if record.n_symbols:
        const = QamConstellation.from_order(record.constellation_order)
        env = ofdm_envelope(qam_map(record.tx_indices.ravel(), const), cfg)
        spS = cfg.samples_per_symbol() + cfg.cyclic_prefix_samples
    else:
        rate = record.sample_rate
        n = np.arange(record.samples.size)
        env = 2.0 * record.samples.astype(np.float64) * np.exp(
            -2j * np.pi * cfg.center_frequency / rate * n
        )
        env = _lowpass_brickwall(env, rate, cfg.center_frequency)
        spS = cfg.samples_per_symbol(rate) + int(
            round(cfg.cyclic_prefix_samples * rate / cfg.analog_rate)
        )
    return papr_per_symbol_db(env, spS)


def papr_ccdf(papr_values_db: np.ndarray, thresholds_db: np.ndarray | None = None):
    """CCDF table: probability that the per-symbol PAPR exceeds each threshold."""
    vals = np.asarray(papr_values_db, dtype=float)
    if vals.size == 0:
        raise SignalError("no PAPR values")
    if thresholds_db is None:
        thresholds_db = np.arange(0.0, 14.25, 0.25)
    ccdf = np.array([(vals > t).mean() for t in thresholds_db])
    return np.asarray(thresholds_db, dtype=float), ccdf
