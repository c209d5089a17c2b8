"""Post-training quantization and fixed-point-style inference emulation.

Batchnorm folds into the preceding convolution, weights and activations get
symmetric per-tensor scales calibrated from max-abs statistics, and the LSTM
nonlinearities run through interpolated lookup tables, emulating a hardware
implementation. Quantization-aware training is deliberately not offered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from adccal.calibrate import NetworkModel, StreamResult, CalibrationError
from adccal.nn import _sigmoid

_BN_EPS = 1e-5


class QuantError(ValueError):
    """Rejected quantization parameter or input."""


@dataclass(frozen=True)
class QuantScheme:
    weight_bits: int
    activation_bits: int
    lut_size: int = 256

    def __post_init__(self):
        for b in (self.weight_bits, self.activation_bits):
            if not 4 <= b <= 24:
                raise QuantError(f"bit width {b} outside [4, 24]")
        if self.lut_size < 16:
            raise QuantError("need at least 16 LUT entries")


@dataclass
class QuantTensor:
    q: np.ndarray  # int32 codes
    scale: float

    @property
    def deq(self) -> np.ndarray:
        return self.q.astype(np.float64) * self.scale


def _qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def quantize_tensor(w: np.ndarray, bits: int, flags: list | None = None,
                    name: str = "") -> QuantTensor:
    """Symmetric per-tensor quantization; all-zero tensors get scale 1."""
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        if flags is not None:
            flags.append(f"all-zero tensor '{name}': scale defaulted to 1")
        scale = 1.0
    else:
        scale = peak / _qmax(bits)
    q = np.clip(np.round(np.asarray(w, dtype=np.float64) / scale),
                -_qmax(bits), _qmax(bits)).astype(np.int32)
    return QuantTensor(q=q, scale=scale)


def fake_quant(x: np.ndarray, scale: float, bits: int) -> np.ndarray:
    """Round to the activation grid and saturate symmetrically."""
    qm = _qmax(bits)
    return np.clip(np.round(x / scale), -qm, qm) * scale


def fold_batchnorm(model: NetworkModel) -> NetworkModel:
    """Absorb each batchnorm into its preceding convolution (inference-mode
    algebraic identity); the folded model's batchnorms become identities."""
    folded = NetworkModel(
        seed=model.seed, window_length=model.window_length,
        current_index=model.current_index, norm_scale=model.norm_scale,
        resolution_bits=model.resolution_bits, dtype=model.dtype,
    )
    folded.load_state(model.state())
    for conv, bn in zip(folded.convs, folded.bns):
        ivar = 1.0 / np.sqrt(bn.running_var.astype(np.float64) + _BN_EPS)
        g = bn.gamma.value.astype(np.float64) * ivar
        conv.weight.value[...] = (conv.weight.value * g[:, None, None]).astype(conv.weight.value.dtype)
        conv.bias.value[...] = (
            (conv.bias.value.astype(np.float64) - bn.running_mean) * g
            + bn.beta.value
        ).astype(conv.bias.value.dtype)
        bn.gamma.value[...] = 1.0
        bn.beta.value[...] = 0.0
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 1.0 - _BN_EPS
        bn.batches_tracked = max(bn.batches_tracked, 1)
    return folded


def _conv_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 same-padding convolution on channels-last [B, L, C]."""
    b, length, c = x.shape
    out_ch, _, k = weight.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)
    cols = np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(b * length, k * c)
    wmat = weight.transpose(2, 1, 0).reshape(-1, out_ch)
    return (cols @ wmat + bias).reshape(b, length, out_ch)


@dataclass
class _LstmLut:
    grid_pre: np.ndarray
    tanh_pre: np.ndarray
    sigm_pre: np.ndarray
    grid_cell: np.ndarray
    tanh_cell: np.ndarray


@dataclass
class QuantizedModel:
    """Inference-only fixed-point emulation of a trained corrector."""

    scheme: QuantScheme
    window_length: int
    current_index: int
    norm_scale: float
    conv_w: list
    conv_b: list
    lstm_w_ih: list
    lstm_w_hh: list
    lstm_b: list
    linear_w: QuantTensor = None
    linear_b: QuantTensor = None
    act_scales: dict = field(default_factory=dict)
    luts: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """[batch, 1, window] -> [batch, 1], all activations on their grids."""
        bits = self.scheme.activation_bits
        h = np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(0, 2, 1))
        h = fake_quant(h, self.act_scales["input"], bits)
        for i in range(len(self.conv_w)):
            h = _conv_same(h, self.conv_w[i].deq, self.conv_b[i].deq)
            h = np.maximum(h, 0.0)
            h = fake_quant(h, self.act_scales[f"conv{i}"], bits)
        for i in range(len(self.lstm_w_ih)):
            h = self._lstm_layer(h, i)
        h = h.reshape(h.shape[0], -1)
        out = h @ self.linear_w.deq.T + self.linear_b.deq
        return fake_quant(out, self.act_scales["output"], bits)

    def _lstm_layer(self, x: np.ndarray, i: int) -> np.ndarray:
        bits = self.scheme.activation_bits
        w_ih = self.lstm_w_ih[i].deq
        w_hh = self.lstm_w_hh[i].deq
        bias = self.lstm_b[i].deq
        lut = self.luts[i]
        b, t_len, _ = x.shape
        hd = w_hh.shape[1]
        pre_x = x.reshape(-1, x.shape[2]) @ w_ih.T
        pre_x = pre_x.reshape(b, t_len, 4 * hd)
        h = np.zeros((b, hd))
        c = np.zeros((b, hd))
        out = np.empty((b, t_len, hd))
        s_pre = self.act_scales[f"lstm{i}.pre"]
        s_c = self.act_scales[f"lstm{i}.cell"]
        s_h = self.act_scales[f"lstm{i}.hidden"]
        for t in range(t_len):
            pre = fake_quant(pre_x[:, t] + h @ w_hh.T + bias, s_pre, bits)
            i_g = np.interp(pre[:, :hd], lut.grid_pre, lut.sigm_pre)
            f_g = np.interp(pre[:, hd : 2 * hd], lut.grid_pre, lut.sigm_pre)
            g_g = np.interp(pre[:, 2 * hd : 3 * hd], lut.grid_pre, lut.tanh_pre)
            o_g = np.interp(pre[:, 3 * hd :], lut.grid_pre, lut.sigm_pre)
            c = fake_quant(f_g * c + i_g * g_g, s_c, bits)
            tc = np.interp(c, lut.grid_cell, lut.tanh_cell)
            h = fake_quant(o_g * tc, s_h, bits)
            out[:, t] = h
        return out


def _float_forward_with_stats(model: NetworkModel, x: np.ndarray, stats: dict):
    """Inference pass through a folded float model, recording max-abs at
    every quantization point."""
    def track(name, arr):
        stats[name] = max(stats.get(name, 0.0), float(np.max(np.abs(arr))))

    track("input", x)
    h = np.ascontiguousarray(np.asarray(x, dtype=model.dtype).transpose(0, 2, 1))
    for i, (conv, bn, relu) in enumerate(zip(model.convs, model.bns, model.relus)):
        h = relu.forward(bn.forward(conv.forward(h, False), False), False)
        track(f"conv{i}", h)
    for i, lstm in enumerate(model.lstms):
        b, t_len, _ = h.shape
        hd = lstm.hidden
        pre_x = h.reshape(-1, h.shape[2]) @ lstm.w_ih.value.T
        pre_x = pre_x.reshape(b, t_len, 4 * hd)
        hh = np.zeros((b, hd), dtype=h.dtype)
        cc = np.zeros((b, hd), dtype=h.dtype)
        out = np.empty((b, t_len, hd), dtype=h.dtype)
        for t in range(t_len):
            pre = pre_x[:, t] + hh @ lstm.w_hh.value.T + lstm.bias.value
            track(f"lstm{i}.pre", pre)
            i_g = _sigmoid(pre[:, :hd])
            f_g = _sigmoid(pre[:, hd : 2 * hd])
            g_g = np.tanh(pre[:, 2 * hd : 3 * hd])
            o_g = _sigmoid(pre[:, 3 * hd :])
            cc = f_g * cc + i_g * g_g
            track(f"lstm{i}.cell", cc)
            hh = o_g * np.tanh(cc)
            track(f"lstm{i}.hidden", hh)
            out[:, t] = hh
        h = out
    h = h.reshape(h.shape[0], -1)
    out = model.linear.forward(h, False)
    track("output", out)
    return out


def calibrate_and_quantize(
    model: NetworkModel,
    scheme: QuantScheme,
    calib_windows: np.ndarray,
    *,
    batch_size: int = 1024,
    min_calib: int = 1000,
) -> QuantizedModel:
    """Fold batchnorm, quantize every weight tensor, and calibrate activation
    scales from a max-abs pass over the calibration windows."""
    calib = np.asarray(calib_windows, dtype=model.dtype)
    if calib.ndim != 2 or calib.shape[0] < min_calib:
        raise QuantError(f"need at least {min_calib} calibration windows")
    folded = fold_batchnorm(model)
    stats: dict[str, float] = {}
    for lo in range(0, calib.shape[0], batch_size):
        block = calib[lo : lo + batch_size][:, None, :]
        _float_forward_with_stats(folded, block, stats)

    bits = scheme.activation_bits
    act_scales = {}
    flags: list[str] = []
    for name, peak in stats.items():
        if peak == 0.0:
            flags.append(f"zero activation range at '{name}': scale defaulted to 1")
            peak = float(_qmax(bits))
        act_scales[name] = peak / _qmax(bits)

    wb = scheme.weight_bits
    conv_w = [quantize_tensor(c.weight.value, wb, flags, f"conv{i}.weight")
              for i, c in enumerate(folded.convs)]
    conv_b = [quantize_tensor(c.bias.value, wb, flags, f"conv{i}.bias")
              for i, c in enumerate(folded.convs)]
    lstm_w_ih = [quantize_tensor(l.w_ih.value, wb, flags, f"lstm{i}.w_ih")
                 for i, l in enumerate(folded.lstms)]
    lstm_w_hh = [quantize_tensor(l.w_hh.value, wb, flags, f"lstm{i}.w_hh")
                 for i, l in enumerate(folded.lstms)]
    lstm_b = [quantize_tensor(l.bias.value, wb, flags, f"lstm{i}.bias")
              for i, l in enumerate(folded.lstms)]
    linear_w = quantize_tensor(folded.linear.weight.value, wb, flags, "linear.weight")
    linear_b = quantize_tensor(folded.linear.bias.value, wb, flags, "linear.bias")

    luts = []
    for i in range(len(folded.lstms)):
        r_pre = act_scales[f"lstm{i}.pre"] * _qmax(bits)
        r_cell = act_scales[f"lstm{i}.cell"] * _qmax(bits)
        grid_pre = np.linspace(-r_pre, r_pre, scheme.lut_size)
        grid_cell = np.linspace(-r_cell, r_cell, scheme.lut_size)
        luts.append(_LstmLut(
            grid_pre=grid_pre,
            tanh_pre=np.tanh(grid_pre),
            sigm_pre=_sigmoid(grid_pre),
            grid_cell=grid_cell,
            tanh_cell=np.tanh(grid_cell),
        ))

    return QuantizedModel(
        scheme=scheme,
        window_length=model.window_length,
        current_index=model.current_index,
        norm_scale=model.norm_scale,
        conv_w=conv_w, conv_b=conv_b,
        lstm_w_ih=lstm_w_ih, lstm_w_hh=lstm_w_hh, lstm_b=lstm_b,
        linear_w=linear_w, linear_b=linear_b,
        act_scales=act_scales, luts=luts, flags=flags,
    )


def quantized_infer_stream(
    qmodel: QuantizedModel, codes: np.ndarray, *, batch_size: int = 4096
) -> StreamResult:
    """Streaming inference with the quantized model (mirrors the float path)."""
    wl = qmodel.window_length
    if len(codes) < wl:
        raise CalibrationError(f"stream shorter than one window ({len(codes)} < {wl})")
    x = np.asarray(codes, dtype=np.float64) / qmodel.norm_scale
    windows = np.lib.stride_tricks.sliding_window_view(x, wl)
    out = np.empty(windows.shape[0])
    for lo in range(0, windows.shape[0], batch_size):
        block = np.ascontiguousarray(windows[lo : lo + batch_size])[:, None, :]
        out[lo : lo + block.shape[0]] = qmodel.forward(block)[:, 0]
    return StreamResult(values=out.astype(np.float32), start=qmodel.current_index)


@dataclass
class SweepRow:
    bits: int  # 0 tags the float baseline
    enob: float
    sndr: float
    mse: float
    max_abs_error: float


def sweep_bitwidths(
    model: NetworkModel,
    bit_list: list[int],
    eval_codes: np.ndarray,
    eval_ideal_normalized: np.ndarray,
    calib_windows: np.ndarray,
    *,
    lut_size: int = 256,
    edge_exclude: int = 128,
) -> list[SweepRow]:
    """Quantize + evaluate once per bit width against the same calibration
    set and evaluation capture; returns the float baseline as bits = 0."""
    from adccal.calibrate import infer_stream
    from adccal.metrics import sndr_enob

    if not bit_list:
        raise QuantError("empty bit-width list")

    def score(stream: StreamResult) -> SweepRow:
        ref, got = stream.aligned_with(eval_ideal_normalized)
        sndr, enob = sndr_enob(ref, got, edge_exclude=edge_exclude)
        err = got[edge_exclude:-edge_exclude] - ref[edge_exclude:-edge_exclude]
        return SweepRow(bits=0, enob=enob, sndr=sndr,
                        mse=float(np.mean(err.astype(np.float64) ** 2)),
                        max_abs_error=float(np.max(np.abs(err))))

    rows = [score(infer_stream(model, eval_codes))]
    for bits in bit_list:
        scheme = QuantScheme(weight_bits=bits, activation_bits=bits, lut_size=lut_size)
        qmodel = calibrate_and_quantize(model, scheme, calib_windows)
        row = score(quantized_infer_stream(qmodel, eval_codes))
        row.bits = bits
        rows.append(row)
    return rows
