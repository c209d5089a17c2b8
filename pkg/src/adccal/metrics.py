"""Dynamic-performance figures of merit: SNDR/ENOB, LSB error, spectra, SER.

SNDR is error-power based: the test signal is compared sample by sample
against a cleaner reference over the full record (optionally excluding a
window at each edge), not via a sine fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

SNDR_CAP_DB = 200.0  # export cap for the +inf sentinel
MIN_SNDR_SAMPLES = 4096


class MetricsError(ValueError):
    """Rejected input for a metrics operation."""


def sndr_enob(
    reference: np.ndarray,
    test: np.ndarray,
    edge_exclude: int = 0,
) -> tuple[float, float]:
    """SNDR in dB and ENOB in bits of `test` against `reference`.

    Returns (inf, inf) when the error power is exactly zero; exporters cap
    that at ``SNDR_CAP_DB``.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise MetricsError(f"length mismatch: {ref.shape} vs {tst.shape}")
    if edge_exclude:
        ref = ref[edge_exclude:-edge_exclude]
        tst = tst[edge_exclude:-edge_exclude]
    if ref.size < MIN_SNDR_SAMPLES:
        raise MetricsError(f"need at least {MIN_SNDR_SAMPLES} samples, got {ref.size}")
    p_sig = np.sum(ref**2)
    if p_sig == 0.0:
        raise MetricsError("reference is identically zero")
    p_err = np.sum((tst - ref) ** 2)
    if p_err == 0.0:
        return np.inf, np.inf
    sndr = 10.0 * np.log10(p_sig / p_err)
    return sndr, (sndr - 1.76) / 6.02


def enob_from_sndr(sndr_db: float) -> float:
    return (sndr_db - 1.76) / 6.02


def lsb_error_trace(
    reference_codes: np.ndarray,
    test_normalized: np.ndarray,
    bits: int,
) -> np.ndarray:
    """Per-sample error in LSB units.

    ``test_normalized`` uses the shared code normalization x = code / 2^(bits-1),
    so one quantizer step equals 2^(1-bits); the trace is the error divided by
    that step.
    """
    ref = np.asarray(reference_codes, dtype=np.float64)
    tst = np.asarray(test_normalized, dtype=np.float64)
    if ref.shape != tst.shape:
        raise MetricsError(f"length mismatch: {ref.shape} vs {tst.shape}")
    scale = float(1 << (bits - 1))
    return (tst - ref / scale) * scale


@dataclass
class SpectrumResult:
    freqs: np.ndarray          # Hz, one-sided bins
    magnitude_db: np.ndarray   # tone-calibrated power per bin, dB
    phase_rad: np.ndarray      # rectangular-window phase of the first segment
    rbw: float
    enbw_bins: float           # noise bandwidth of the magnitude window, in bins

    def total_power(self) -> float:
        """Window-compensated total power (Parseval check)."""
        return float(np.sum(10.0 ** (self.magnitude_db / 10.0)) / self.enbw_bins)

    def band_power(self, f_lo: float, f_hi: float) -> float:
        sel = (self.freqs >= f_lo) & (self.freqs <= f_hi)
        return float(np.sum(10.0 ** (self.magnitude_db[sel] / 10.0)) / self.enbw_bins)


def spectrum(signal: np.ndarray, sample_rate: float, rbw: float) -> SpectrumResult:
    """Welch-averaged one-sided spectrum at the requested resolution bandwidth.

    Magnitude uses a flat-top window with coherent-gain correction so a tone
    at a bin center reads its true power; phase comes from a rectangular
    window on the first segment.
    """
    x = np.asarray(signal, dtype=np.float64)
    nseg = int(round(sample_rate / rbw))
    if x.size < nseg:
        raise MetricsError(f"need at least {nseg} samples for RBW {rbw:g} Hz")
    win = get_window("flattop", nseg, fftbins=True)
    cg = win.sum()
    enbw_bins = nseg * np.sum(win**2) / cg**2
    hop = nseg // 2
    n_segs = 1 + (x.size - nseg) // hop
    acc = np.zeros(nseg // 2 + 1)
    for i in range(n_segs):
        seg = x[i * hop : i * hop + nseg]
        fx = np.fft.rfft(seg * win)
        p = np.abs(fx) ** 2 / cg**2
        p[1:-1] *= 2.0  # one-sided
        acc += p
    acc /= n_segs
    phase = np.angle(np.fft.rfft(x[:nseg]))
    freqs = np.fft.rfftfreq(nseg, d=1.0 / sample_rate)
    with np.errstate(divide="ignore"):
        mag_db = 10.0 * np.log10(acc)
    return SpectrumResult(
        freqs=freqs,
        magnitude_db=mag_db,
        phase_rad=phase,
        rbw=sample_rate / nseg,
        enbw_bins=enbw_bins,
    )


def symbol_error_rate(tx_indices: np.ndarray, rx_indices: np.ndarray) -> float:
    """Fraction of mismatched symbol decisions."""
    tx = np.asarray(tx_indices).ravel()
    rx = np.asarray(rx_indices).ravel()
    if tx.size != rx.size:
        raise MetricsError(f"length mismatch: {tx.size} vs {rx.size}")
    if tx.size == 0:
        raise MetricsError("empty symbol sequences")
    return float(np.mean(tx != rx))


def cap_sndr(sndr_db: float) -> float:
    """Clamp the +inf sentinel for CSV export."""
    return min(float(sndr_db), SNDR_CAP_DB) if np.isfinite(sndr_db) else SNDR_CAP_DB
