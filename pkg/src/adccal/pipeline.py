"""End-to-end experiment stages: dataset generation, training, evaluation,
and the fixed-point bit-width sweep. The CLI is a thin wrapper around these.

Every stage is reproducible from (config, seeds): rerunning overwrites data
files with identical bytes (manifests carry a timestamp comment line, which
is the only exception).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from adccal import metrics as mt
from adccal import signals as sg
from adccal.adc import AdcCapture, default_adc_config, simulate_interleaved
from adccal.calibrate import (
    NetworkModel, TrainHyper, WindowConfig, infer_stream, load_model,
    make_windows, merge_datasets, save_model, train,
)
from adccal.config import RunConfig
from adccal.containers import load_capture, load_record, save_capture, save_record
from adccal.quant import sweep_bitwidths
from adccal.shift import shift_correct

VARIANTS = ("ideal", "nonideal", "shift", "nn")


class DataError(RuntimeError):
    """Missing or malformed input data for a pipeline stage."""


def ofdm_from_config(cfg: RunConfig) -> sg.OfdmConfig:
    return sg.OfdmConfig(
        n_subcarriers=cfg.ofdm.n_subcarriers,
        subcarrier_spacing=cfg.ofdm.subcarrier_spacing_hz,
        center_frequency=cfg.ofdm.center_frequency_hz,
        analog_rate=cfg.ofdm.analog_rate_hz,
        cyclic_prefix_samples=cfg.ofdm.cyclic_prefix_samples,
    )


def adc_from_config(cfg: RunConfig):
    return default_adc_config(
        seed=cfg.adc.seed,
        n_channels=cfg.adc.n_channels,
        channel_rate=cfg.adc.channel_rate_hz,
        resolution_bits=cfg.adc.resolution_bits,
        full_scale=cfg.adc.full_scale_v,
        skew_spread=cfg.adc.skew_spread_s,
        jitter_rms=cfg.adc.jitter_rms_s,
        jitter_bandwidth=cfg.adc.jitter_bandwidth_hz,
        ripple_db_range=(cfg.adc.ripple_db_min, cfg.adc.ripple_db_max),
        corner_hz_range=(cfg.adc.corner_hz_min, cfg.adc.corner_hz_max),
        filter_order=cfg.adc.filter_order,
        nonlin_scale_range=(cfg.adc.nonlin_scale_min, cfg.adc.nonlin_scale_max),
    )


def window_from_config(cfg: RunConfig) -> WindowConfig:
    return WindowConfig(
        window_length=cfg.window.window_length,
        current_index=cfg.window.current_index,
        stride=cfg.window.stride,
    )


def record_seed(base_seed: int, order: int, role: str) -> int:
    role_tag = {"train": 0, "eval": 1}[role]
    return int(np.random.SeedSequence([base_seed, order, role_tag]).generate_state(1)[0])


def _verify_band(ofdm: sg.OfdmConfig, aggregate_rate: float):
    edge = ofdm.center_frequency + ofdm.bandwidth / 2
    if edge >= aggregate_rate / 2:
        raise DataError(
            f"occupied band edge {edge:g} Hz exceeds the aggregate Nyquist "
            f"{aggregate_rate / 2:g} Hz")


def run_gen(cfg: RunConfig, out_dir: str | Path, log=print) -> list[Path]:
    """Write waveform records and ADC captures for every configured
    constellation, plus a manifest of the drawn channel parameters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ofdm = ofdm_from_config(cfg)
    adc_cfg = adc_from_config(cfg)
    _verify_band(ofdm, adc_cfg.aggregate_rate)
    peak = cfg.signal.peak_fraction * cfg.adc.full_scale_v / 2.0
    written = []
    manifest = [
        f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        f"adc_seed {adc_cfg.seed}",
        f"signal_seed {cfg.signal.seed}",
        "channel skew_s ripple_db corner_hz nonlin_scale_v",
    ]
    for m, ch in enumerate(adc_cfg.channels):
        manifest.append(
            f"{m} {ch.skew:.6e} {ch.filter_ripple_db:.4f} "
            f"{ch.filter_corner_hz:.6e} {ch.nonlinearity_scale:.6f}")
    for order in cfg.signal.constellations:
        for role, n_sym in (("train", cfg.signal.train_symbols),
                            ("eval", cfg.signal.eval_symbols)):
            seed = record_seed(cfg.signal.seed, order, role)
            rec = sg.generate_record(order, n_sym, ofdm, seed, peak_amplitude=peak)
            rec_name = f"rec_{role}_q{order}.wfm"
            save_record(rec, out / rec_name)
            cap = simulate_interleaved(rec, adc_cfg)
            cap.source_record = rec_name
            cap_name = f"cap_{role}_q{order}.cap"
            save_capture(cap, out / cap_name)
            written += [out / rec_name, out / cap_name]
            manifest.append(
                f"file {rec_name} seed {seed} symbols {n_sym} "
                f"clips {cap.clip_nonideal}/{cap.clip_ideal}")
            log(f"gen: {cap_name} ({len(cap)} samples, order {order}, {role})")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return written


def run_train(cfg: RunConfig, dataset_dir: str | Path, model_out: str | Path,
              resume: str | Path | None = None, log=print):
    """Train the shared corrector on every training capture in the dataset
    directory; the model file is written only on success."""
    dataset_dir = Path(dataset_dir)
    paths = sorted(dataset_dir.glob("cap_train_*.cap"))
    if not paths:
        raise DataError(f"no training captures (cap_train_*.cap) in {dataset_dir}")
    wcfg = window_from_config(cfg)
    parts = []
    for p in paths:
        cap = load_capture(p)
        parts.append(make_windows(cap, wcfg))
        log(f"train: loaded {p.name}: {len(parts[-1])} windows")
    dataset = merge_datasets(parts, seed=cfg.train.seed)
    log(f"train: {len(dataset)} windows total")
    model = None
    if resume is not None:
        model = load_model(resume)
        log(f"train: resuming from {resume}")
    hyper = TrainHyper(
        lr=cfg.train.lr, batch_size=cfg.train.batch_size, epochs=cfg.train.epochs,
        seed=cfg.train.seed, optimizer=cfg.train.optimizer,
        val_fraction=cfg.train.val_fraction,
    )
    model, report = train(dataset, hyper, model=model, log=log)
    model_out = Path(model_out)
    model_out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_out)
    report.to_csv(model_out.parent / "train_report.csv")
    log(f"train: best val loss {report.best_val_loss:.3e} at epoch "
        f"{report.best_epoch}; model -> {model_out}")
    return model, report


@dataclass
class VariantMetrics:
    sndr_db: float
    enob_bits: float
    ser: float


@dataclass
class EvalResult:
    order: int
    variants: dict
    delay_samples: float
    latency_samples: int
    files: list


def _csv(path: Path, header: str, rows):
    lines = [header]
    for row in rows:
        lines.append(",".join(f"{v:.10g}" if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


def evaluate_capture(cfg: RunConfig, model: NetworkModel, capture: AdcCapture,
                     record: sg.WaveformRecord | None, out_dir: Path,
                     log=print) -> EvalResult:
    """Produce the four-variant metric set and figure CSVs for one capture."""
    out_dir.mkdir(parents=True, exist_ok=True)
    order = capture.source_order
    adc_cfg = capture.config
    agg = adc_cfg.aggregate_rate
    bits = adc_cfg.resolution_bits
    ee = cfg.eval.edge_exclude
    ofdm = ofdm_from_config(cfg)

    ideal_n = capture.ideal_normalized
    non_n = capture.nonideal_normalized
    shift_vals, delay = shift_correct(ideal_n, non_n)
    stream = infer_stream(model, capture.nonideal_codes)
    nn_full = non_n.copy()
    nn_full[stream.start : stream.start + len(stream.values)] = stream.values
    latency = model.window_length - 1 - model.current_index
    log(f"eval q{order}: delay estimate {delay.delay:+.3f} samples "
        f"(r = {delay.coefficient:.3f}); corrector latency {latency} samples "
        f"= {latency / agg * 1e9:.3f} ns at {agg / 1e9:.3f} GS/s")

    # SNDR/ENOB per variant, against the ideal-path codes
    results: dict[str, VariantMetrics] = {}
    pairs = {
        "nonideal": (ideal_n, non_n),
        "shift": (ideal_n, shift_vals),
        "nn": stream.aligned_with(ideal_n),
    }
    for name, (ref, got) in pairs.items():
        sndr, enob = mt.sndr_enob(ref, got, edge_exclude=ee)
        results[name] = VariantMetrics(sndr_db=sndr, enob_bits=enob, ser=np.nan)
    # the ideal variant is scored against the unquantized source waveform
    if record is not None:
        ratio = int(round(record.sample_rate / agg))
        n = len(ideal_n)
        analog_n = (record.samples[: n * ratio : ratio].astype(np.float64)
                    / (adc_cfg.full_scale / 2.0))
        sndr, enob = mt.sndr_enob(analog_n, ideal_n, edge_exclude=ee)
    else:
        sndr, enob = np.inf, np.inf
    results["ideal"] = VariantMetrics(sndr_db=sndr, enob_bits=enob, ser=np.nan)

    # symbol error rates (edge OFDM symbols dropped; receiver-side AGC)
    if record is not None and record.n_symbols >= 3:
        const = sg.QamConstellation.from_order(order)
        tx = record.tx_indices[1:-1]
        arrays = {"ideal": ideal_n, "nonideal": non_n, "shift": shift_vals,
                  "nn": nn_full}
        for name, arr in arrays.items():
            est = sg.ofdm_demodulate(arr, ofdm, sample_rate=agg)
            est = est.reshape(record.n_symbols, -1)[1:-1]
            rx = sg.qam_slice(sg.normalize_power(est.ravel()), const)
            results[name].ser = mt.symbol_error_rate(tx.ravel(), rx)

    files = []

    def emit(name: str, header: str, rows):
        path = out_dir / name
        _csv(path, header, rows)
        files.append(path)

    emit(f"metrics_q{order}.csv",
         "variant,constellation_order,sndr_db,enob_bits,ser",
         [(v, order, mt.cap_sndr(results[v].sndr_db),
           mt.enob_from_sndr(mt.cap_sndr(results[v].sndr_db)),
           float(results[v].ser)) for v in VARIANTS])

    # time-domain overlay of a clean interior stretch
    spS = ofdm.samples_per_symbol(agg)
    n_overlay = min(cfg.eval.overlay_symbols * spS, len(ideal_n) - 2 * spS)
    lo = spS  # skip the first symbol
    idx = np.arange(lo, lo + n_overlay)
    emit(f"time_overlay_q{order}.csv",
         "sample_index,ideal,nonideal,shift,nn",
         [(int(k), float(ideal_n[k]), float(non_n[k]), float(shift_vals[k]),
           float(nn_full[k])) for k in idx])

    # per-variant LSB error traces over the same stretch
    arrays = {"ideal": ideal_n, "nonideal": non_n, "shift": shift_vals, "nn": nn_full}
    for name, arr in arrays.items():
        trace = mt.lsb_error_trace(capture.ideal_codes[idx], arr[idx], bits)
        emit(f"lsb_error_{name}_q{order}.csv",
             "sample_index,error_lsb",
             [(int(k), float(e)) for k, e in zip(idx, trace)])

    # spectra at the configured RBW (skipped when the capture is too short)
    n_seg = int(round(agg / cfg.eval.rbw_hz))
    for name, arr in arrays.items():
        if len(arr) - 2 * ee < n_seg:
            break
        spec = mt.spectrum(arr[ee:-ee] if ee else arr, agg, cfg.eval.rbw_hz)
        band = (spec.freqs >= ofdm.center_frequency - ofdm.bandwidth)
        band &= (spec.freqs <= ofdm.center_frequency + ofdm.bandwidth)
        emit(f"spectrum_{name}_q{order}.csv",
             "freq_hz,magnitude_db,phase_rad",
             [(float(f), float(m), float(p)) for f, m, p in
              zip(spec.freqs[band], spec.magnitude_db[band], spec.phase_rad[band])])

    # PAPR CCDF of the source waveform
    if record is not None and record.n_symbols:
        papr = sg.papr_db(record, ofdm)
        thr, ccdf = sg.papr_ccdf(papr)
        emit(f"papr_ccdf_q{order}.csv", "papr_db,prob_exceed",
             [(float(t), float(c)) for t, c in zip(thr, ccdf)])

    return EvalResult(order=order, variants=results, delay_samples=delay.delay,
                      latency_samples=latency, files=files)


def _resolve_record(capture_path: Path, capture: AdcCapture):
    if not capture.source_record:
        return None
    rec_path = capture_path.parent / capture.source_record
    if not rec_path.exists():
        return None
    return load_record(rec_path)


def run_eval(cfg: RunConfig, model_path: str | Path, capture_path: str | Path,
             out_dir: str | Path, log=print) -> list[EvalResult]:
    """Evaluate one capture file, or every eval capture in a directory,
    with the same shared model (no per-constellation retraining)."""
    model = load_model(model_path)
    capture_path = Path(capture_path)
    if capture_path.is_dir():
        paths = sorted(capture_path.glob("cap_eval_*.cap"))
        if not paths:
            raise DataError(f"no eval captures (cap_eval_*.cap) in {capture_path}")
    else:
        if not capture_path.exists():
            raise DataError(f"capture not found: {capture_path}")
        paths = [capture_path]
    out_dir = Path(out_dir)
    results = []
    for p in paths:
        capture = load_capture(p)
        record = _resolve_record(p, capture)
        res = evaluate_capture(cfg, model, capture, record, out_dir, log=log)
        results.append(res)
        for v in VARIANTS:
            m = res.variants[v]
            log(f"eval q{res.order}: {v:9s} sndr {mt.cap_sndr(m.sndr_db):7.2f} dB  "
                f"enob {mt.enob_from_sndr(mt.cap_sndr(m.sndr_db)):6.2f} bits  "
                f"ser {m.ser:.3e}")
    summary = out_dir / "metrics_summary.csv"
    rows = []
    for res in results:
        for v in VARIANTS:
            m = res.variants[v]
            rows.append((v, res.order, mt.cap_sndr(m.sndr_db),
                         mt.enob_from_sndr(mt.cap_sndr(m.sndr_db)), float(m.ser)))
    _csv(summary, "variant,constellation_order,sndr_db,enob_bits,ser", rows)
    return results


def run_quant_sweep(cfg: RunConfig, model_path: str | Path,
                    capture_path: str | Path, out_csv: str | Path,
                    log=print):
    """Post-training quantization sweep over the configured bit widths."""
    model = load_model(model_path)
    capture_path = Path(capture_path)
    if not capture_path.exists():
        raise DataError(f"capture not found: {capture_path}")
    capture = load_capture(capture_path)
    wl = model.window_length
    non_n = (capture.nonideal_codes.astype(np.float32) / model.norm_scale)
    all_windows = np.lib.stride_tricks.sliding_window_view(non_n, wl)
    n_calib = min(cfg.quant.calib_windows, all_windows.shape[0])
    sel = np.linspace(0, all_windows.shape[0] - 1, n_calib).astype(np.int64)
    calib = np.ascontiguousarray(all_windows[sel])
    rows = sweep_bitwidths(
        model, list(cfg.quant.bit_list), capture.nonideal_codes,
        capture.ideal_normalized, calib,
        lut_size=cfg.quant.lut_size, edge_exclude=cfg.eval.edge_exclude,
    )
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    _csv(out_csv, "bits_0_means_float,enob_bits,sndr_db,mse,max_abs_error",
         [(r.bits, float(r.enob), float(mt.cap_sndr(r.sndr)), r.mse,
           r.max_abs_error) for r in rows])
    for r in rows:
        tag = "float" if r.bits == 0 else f"{r.bits:5d}"
        log(f"quant {tag}: enob {r.enob:6.2f} bits  sndr {mt.cap_sndr(r.sndr):7.2f} dB  "
            f"mse {r.mse:.3e}")
    return rows
