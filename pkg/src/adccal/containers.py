"""On-disk containers shared by every stage of the pipeline.

All files use the same layout: a UTF-8 ``key value`` text header opened by a
magic line and terminated by one blank line, then a little-endian binary
payload. Waveforms store float32 (interleaved re/im when complex), captures
store int16 code pairs, models store float32 tensors.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from adccal.adc import AdcCapture, AdcConfig, ChannelImpairments
from adccal.signals import WaveformRecord

MAGIC = "adccal-container"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Malformed or mismatched container file."""


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_container(path: str | Path, kind: str, header: dict, payload: bytes):
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"kind {kind}"]
    for key, value in header.items():
        lines.append(f"{key} {_fmt(value)}")
    blob = ("\n".join(lines) + "\n\n").encode("utf-8") + payload
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_container(path: str | Path, expect_kind: str | None = None):
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ContainerError(f"{path}: missing header terminator")
    header: dict[str, str] = {}
    lines = blob[:sep].decode("utf-8").split("\n")
    if not lines or not lines[0].startswith(MAGIC):
        raise ContainerError(f"{path}: not an {MAGIC} file")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        header[key] = value
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise ContainerError(
            f"{path}: expected kind '{expect_kind}', found '{header.get('kind')}'"
        )
    return header, blob[sep + 2 :]


def save_record(record: WaveformRecord, path: str | Path):
    samples = np.asarray(record.samples)
    is_complex = np.iscomplexobj(samples)
    if is_complex:
        flat = np.empty(samples.size * 2, dtype="<f4")
        flat[0::2] = samples.real
        flat[1::2] = samples.imag
    else:
        flat = samples.astype("<f4")
    idx = record.tx_indices.astype("<f4").ravel()
    header = {
        "sample_rate": float(record.sample_rate),
        "constellation_order": record.constellation_order,
        "seed": record.seed,
        "n_symbols": record.n_symbols,
        "n_subcarriers": record.n_subcarriers,
        "n_samples": samples.size,
        "complex": int(is_complex),
    }
    write_container(path, "waveform", header, flat.tobytes() + idx.tobytes())


def load_record(path: str | Path) -> WaveformRecord:
    header, payload = read_container(path, "waveform")
    n = int(header["n_samples"])
    is_complex = bool(int(header["complex"]))
    n_sym = int(header["n_symbols"])
    n_sc = int(header["n_subcarriers"])
    floats = np.frombuffer(payload, dtype="<f4")
    width = 2 * n if is_complex else n
    if floats.size != width + n_sym * n_sc:
        raise ContainerError(f"{path}: payload size mismatch")
    if is_complex:
        samples = floats[0:width:2] + 1j * floats[1:width:2]
    else:
        samples = floats[:width].copy()
    idx = floats[width:].astype(np.int32).reshape(n_sym, n_sc)
    return WaveformRecord(
        samples=samples,
        sample_rate=float(header["sample_rate"]),
        tx_indices=idx,
        constellation_order=int(header["constellation_order"]),
        seed=int(header["seed"]),
        n_subcarriers=n_sc,
    )


def _channel_header(m: int, ch: ChannelImpairments) -> dict:
    out = {
        f"channel.{m}.skew": ch.skew,
        f"channel.{m}.jitter_rms": ch.jitter_rms,
        f"channel.{m}.jitter_bandwidth": ch.jitter_bandwidth,
        f"channel.{m}.filter_order": ch.filter_order,
    }
    out[f"channel.{m}.nonlinearity_scale"] = (
        "none" if ch.nonlinearity_scale is None else repr(ch.nonlinearity_scale))
    out[f"channel.{m}.filter_ripple_db"] = (
        "none" if ch.filter_ripple_db is None else repr(ch.filter_ripple_db))
    out[f"channel.{m}.filter_corner_hz"] = (
        "none" if ch.filter_corner_hz is None else repr(ch.filter_corner_hz))
    return out


def _parse_optional(text: str) -> float | None:
    return None if text == "none" else float(text)


def save_capture(capture: AdcCapture, path: str | Path):
    cfg = capture.config
    header = {
        "n_samples": len(capture.nonideal_codes),
        "n_channels": cfg.n_channels,
        "channel_rate": cfg.channel_rate,
        "resolution_bits": cfg.resolution_bits,
        "full_scale": cfg.full_scale,
        "seed": cfg.seed,
        "source_seed": capture.source_seed,
        "source_order": capture.source_order,
        "source_record": capture.source_record or "none",
        "clip_nonideal": capture.clip_nonideal,
        "clip_ideal": capture.clip_ideal,
    }
    for m, ch in enumerate(cfg.channels):
        header.update(_channel_header(m, ch))
    payload = (capture.nonideal_codes.astype("<i2").tobytes()
               + capture.ideal_codes.astype("<i2").tobytes())
    write_container(path, "capture", header, payload)


def load_capture(path: str | Path) -> AdcCapture:
    header, payload = read_container(path, "capture")
    n = int(header["n_samples"])
    n_ch = int(header["n_channels"])
    codes = np.frombuffer(payload, dtype="<i2")
    if codes.size != 2 * n:
        raise ContainerError(f"{path}: payload size mismatch")
    channels = []
    for m in range(n_ch):
        channels.append(ChannelImpairments(
            skew=float(header[f"channel.{m}.skew"]),
            jitter_rms=float(header[f"channel.{m}.jitter_rms"]),
            jitter_bandwidth=float(header[f"channel.{m}.jitter_bandwidth"]),
            nonlinearity_scale=_parse_optional(header[f"channel.{m}.nonlinearity_scale"]),
            filter_ripple_db=_parse_optional(header[f"channel.{m}.filter_ripple_db"]),
            filter_corner_hz=_parse_optional(header[f"channel.{m}.filter_corner_hz"]),
            filter_order=int(header[f"channel.{m}.filter_order"]),
        ))
    cfg = AdcConfig(
        n_channels=n_ch,
        channel_rate=float(header["channel_rate"]),
        resolution_bits=int(header["resolution_bits"]),
        full_scale=float(header["full_scale"]),
        channels=channels,
        seed=int(header["seed"]),
    )
    source_record = header.get("source_record", "none")
    return AdcCapture(
        nonideal_codes=codes[:n].copy(),
        ideal_codes=codes[n:].copy(),
        config=cfg,
        source_seed=int(header["source_seed"]),
        source_order=int(header["source_order"]),
        source_record="" if source_record == "none" else source_record,
        clip_nonideal=int(header["clip_nonideal"]),
        clip_ideal=int(header["clip_ideal"]),
    )
