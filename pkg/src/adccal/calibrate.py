"""Assemble the convolutional-LSTM corrector, build sliding-window datasets
from ADC captures, train against the ideal-path codes, and run streaming
inference with the future-sample buffer.

The network consumes a 64-sample window of normalized non-ideal codes and
regresses the ideal code of the sample at ``current_index`` inside that
window. With the default centered window the algorithmic latency is
``window_length - 1 - current_index`` samples of buffering.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from adccal import nn
from adccal.adc import AdcCapture
from adccal.containers import read_container, write_container

NETWORK_DTYPE = np.float32


class CalibrationError(ValueError):
    """Rejected input to a calibration operation."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, history):
        super().__init__(f"training diverged after epoch {epoch}")
        self.last_good_epoch = epoch
        self.history = history


@dataclass(frozen=True)
class WindowConfig:
    window_length: int = 64
    current_index: int = 31
    stride: int = 1

    def __post_init__(self):
        if not 0 <= self.current_index < self.window_length:
            raise CalibrationError("current_index must lie inside the window")
        if self.stride < 1:
            raise CalibrationError("stride must be >= 1")

    @property
    def latency_samples(self) -> int:
        return self.window_length - 1 - self.current_index


@dataclass
class WindowDataset:
    windows: np.ndarray   # [n, window_length] float32, normalized codes
    targets: np.ndarray   # [n] float32, normalized ideal codes
    labels: np.ndarray    # [n] uint16 constellation order per window
    norm_scale: float     # codes were divided by this (2^(bits-1))
    shuffle_seed: int = 0

    def __len__(self) -> int:
        return len(self.targets)


def make_windows(
    capture: AdcCapture,
    wcfg: WindowConfig = WindowConfig(),
    *,
    trim: int = 0,
) -> WindowDataset:
    """Aligned (window of non-ideal samples -> one ideal sample) pairs.

    Window j spans aggregate indices [j, j + window_length - 1] and its
    target is the ideal code at j + current_index. ``trim`` drops that many
    samples from each end first (for shift-corrected captures whose edges
    are unreliable).
    """
    wl = wcfg.window_length
    non = capture.nonideal_codes
    ideal = capture.ideal_codes
    if trim:
        non = non[trim:-trim]
        ideal = ideal[trim:-trim]
    if non.size < wl:
        raise CalibrationError(f"capture too short: {non.size} < {wl}")
    scale = capture.config.code_scale
    non_n = (non.astype(np.float32)) / scale
    windows = np.lib.stride_tricks.sliding_window_view(non_n, wl)[:: wcfg.stride]
    targets = (ideal[wcfg.current_index : wcfg.current_index + non.size - wl + 1]
               [:: wcfg.stride].astype(np.float32)) / scale
    labels = np.full(len(targets), capture.source_order, dtype=np.uint16)
    return WindowDataset(
        windows=np.ascontiguousarray(windows),
        targets=targets,
        labels=labels,
        norm_scale=scale,
    )


def merge_datasets(parts: list[WindowDataset], seed: int) -> WindowDataset:
    """Concatenate per-record datasets and shuffle them with a recorded seed."""
    if not parts:
        raise CalibrationError("no datasets to merge")
    scale = parts[0].norm_scale
    if any(p.norm_scale != scale for p in parts):
        raise CalibrationError("mixed normalization constants")
    windows = np.concatenate([p.windows for p in parts])
    targets = np.concatenate([p.targets for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5F0F])))
    order = rng.permutation(len(targets))
    return WindowDataset(
        windows=windows[order],
        targets=targets[order],
        labels=labels[order],
        norm_scale=scale,
        shuffle_seed=seed,
    )


class NetworkModel:
    """The corrector network: two double-conv blocks, a three-stage LSTM
    pyramid, and a linear read-out over the flattened hidden sequence."""

    CONV_PLAN = [(1, 64), (64, 64), (64, 128), (128, 128)]
    LSTM_PLAN = [(128, 64), (64, 32), (32, 4)]

    def __init__(self, seed: int = 0, window_length: int = 64,
                 current_index: int = 31, norm_scale: float = 4096.0,
                 resolution_bits: int = 13, dtype=NETWORK_DTYPE):
        self.seed = seed
        self.window_length = window_length
        self.current_index = current_index
        self.norm_scale = float(norm_scale)
        self.resolution_bits = resolution_bits
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x4E7])))
        self.convs: list[nn.Conv1d] = []
        self.bns: list[nn.BatchNorm1d] = []
        self.relus: list[nn.ReLU] = []
        for i, (cin, cout) in enumerate(self.CONV_PLAN):
            self.convs.append(nn.Conv1d(cin, cout, kernel=3, padding=1, rng=rng,
                                        dtype=dtype, data_format="nlc",
                                        input_grad=(i > 0)))
            self.bns.append(nn.BatchNorm1d(cout, dtype=dtype, data_format="nlc"))
            self.relus.append(nn.ReLU())
        self.lstms = [nn.LSTM(fin, h, rng=rng, dtype=dtype, time_major=True)
                      for fin, h in self.LSTM_PLAN]
        lstm_out = self.LSTM_PLAN[-1][1] * window_length
        self.linear = nn.Linear(lstm_out, 1, rng=rng, dtype=dtype)
        expected = self._expected_parameter_count()
        actual = sum(p.value.size for p in self.params())
        assert actual == expected, f"parameter count {actual} != {expected}"

    def _expected_parameter_count(self) -> int:
        total = 0
        for cin, cout in self.CONV_PLAN:
            total += cout * (cin * 3 + 1)  # conv weights + bias
            total += 2 * cout              # batchnorm gamma/beta
        for fin, h in self.LSTM_PLAN:
            total += 4 * (fin * h + h * h + h)
        total += self.LSTM_PLAN[-1][1] * self.window_length + 1
        return total

    def layers(self):
        out = []
        for conv, bn, relu in zip(self.convs, self.bns, self.relus):
            out += [conv, bn, relu]
        out += self.lstms
        out.append(self.linear)
        return out

    def params(self) -> list[nn.Parameter]:
        out = []
        for layer in self.layers():
            out += layer.params()
        return out

    def named_tensors(self):
        names = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            names.append((f"conv{i}.weight", conv.weight))
            names.append((f"conv{i}.bias", conv.bias))
            names.append((f"bn{i}.gamma", bn.gamma))
            names.append((f"bn{i}.beta", bn.beta))
        for i, lstm in enumerate(self.lstms):
            names.append((f"lstm{i}.w_ih", lstm.w_ih))
            names.append((f"lstm{i}.w_hh", lstm.w_hh))
            names.append((f"lstm{i}.bias", lstm.bias))
        names.append(("linear.weight", self.linear.weight))
        names.append(("linear.bias", self.linear.bias))
        return names

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """[batch, 1, window] -> [batch, 1]."""
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.window_length:
            raise CalibrationError(
                f"expected [B, 1, {self.window_length}], got {tuple(x.shape)}")
        # conv stack runs channels-last; the LSTM pyramid runs time-major
        h = np.ascontiguousarray(x.transpose(0, 2, 1))
        for conv, bn, relu in zip(self.convs, self.bns, self.relus):
            h = relu.forward(bn.forward(conv.forward(h, train), train), train)
        h = np.ascontiguousarray(h.transpose(1, 0, 2))
        for lstm in self.lstms:
            h = lstm.forward(h, train)
        h = np.ascontiguousarray(h.transpose(1, 0, 2)).reshape(h.shape[1], -1)
        return self.linear.forward(h, train)

    def backward(self, dout: np.ndarray) -> None:
        d = self.linear.backward(dout)
        d = d.reshape(d.shape[0], self.window_length, self.LSTM_PLAN[-1][1])
        d = np.ascontiguousarray(d.transpose(1, 0, 2))
        for lstm in reversed(self.lstms):
            d = lstm.backward(d)
        d = np.ascontiguousarray(d.transpose(1, 0, 2))
        for conv, bn, relu in zip(reversed(self.convs), reversed(self.bns),
                                  reversed(self.relus)):
            d = conv.backward(bn.backward(relu.backward(d)))

    def state(self) -> dict:
        tensors = {name: p.value.copy() for name, p in self.named_tensors()}
        for i, bn in enumerate(self.bns):
            tensors[f"bn{i}.running_mean"] = bn.running_mean.copy()
            tensors[f"bn{i}.running_var"] = bn.running_var.copy()
        return tensors

    def load_state(self, tensors: dict) -> None:
        for name, p in self.named_tensors():
            p.value[...] = tensors[name]
        for i, bn in enumerate(self.bns):
            bn.running_mean[...] = tensors[f"bn{i}.running_mean"]
            bn.running_var[...] = tensors[f"bn{i}.running_var"]
            bn.batches_tracked = max(bn.batches_tracked, 1)


def build_network(seed: int = 0, **kwargs) -> NetworkModel:
    return NetworkModel(seed=seed, **kwargs)


def save_model(model: NetworkModel, path: str | Path):
    tensors = model.state()
    header = {
        "seed": model.seed,
        "window_length": model.window_length,
        "current_index": model.current_index,
        "norm_scale": model.norm_scale,
        "resolution_bits": model.resolution_bits,
        "n_tensors": len(tensors),
    }
    chunks = []
    for i, (name, value) in enumerate(tensors.items()):
        shape = "x".join(str(d) for d in value.shape)
        header[f"tensor.{i}"] = f"{name} {shape}"
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    write_container(path, "model", header, b"".join(chunks))


def load_model(path: str | Path) -> NetworkModel:
    header, payload = read_container(path, "model")
    model = NetworkModel(
        seed=int(header["seed"]),
        window_length=int(header["window_length"]),
        current_index=int(header["current_index"]),
        norm_scale=float(header["norm_scale"]),
        resolution_bits=int(header["resolution_bits"]),
    )
    tensors = {}
    offset = 0
    for i in range(int(header["n_tensors"])):
        name, shape_txt = header[f"tensor.{i}"].split(" ")
        shape = tuple(int(d) for d in shape_txt.split("x")) if shape_txt else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        tensors[name] = arr.reshape(shape).astype(NETWORK_DTYPE)
    model.load_state(tensors)
    return model


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss, seconds)
    best_epoch: int = -1
    best_val_loss: float = np.inf
    wall_seconds: float = 0.0
    hyper: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path):
        lines = ["epoch,train_loss,val_loss,seconds"]
        for epoch, tr, vl, sec in self.epochs:
            lines.append(f"{epoch},{tr:.10g},{vl:.10g},{sec:.3f}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"
    val_fraction: float = 0.1


def _eval_loss(model: NetworkModel, windows, targets, batch_size: int) -> float:
    total = 0.0
    count = 0
    for lo in range(0, len(targets), batch_size):
        x = windows[lo : lo + batch_size][:, None, :]
        y = targets[lo : lo + batch_size][:, None]
        pred = model.forward(x, train=False)
        total += float(np.sum((pred.astype(np.float64) - y) ** 2))
        count += y.size
    return total / max(count, 1)


def train(
    dataset: WindowDataset,
    hyper: TrainHyper = TrainHyper(),
    *,
    model: NetworkModel | None = None,
    log=None,
) -> tuple[NetworkModel, TrainReport]:
    """Minimize the MSE to the ideal codes; returns the best-validation model.

    Raises TrainingDiverged (with the history so far) if the loss stops
    being finite.
    """
    if len(dataset) == 0:
        raise CalibrationError("empty dataset")
    if model is None:
        model = NetworkModel(seed=hyper.seed, norm_scale=dataset.norm_scale)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([hyper.seed, 0x7EA1])))
    n = len(dataset)
    n_val = max(1, int(round(n * hyper.val_fraction))) if n > 1 else 0
    order = rng.permutation(n)
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if train_idx.size == 0:
        raise CalibrationError("no training windows left after the validation split")

    params = model.params()
    if hyper.optimizer == "adam":
        opt = nn.Adam(params, lr=hyper.lr)
    elif hyper.optimizer == "sgd":
        opt = nn.SGD(params, lr=hyper.lr)
    else:
        raise CalibrationError(f"unknown optimizer '{hyper.optimizer}'")

    report = TrainReport(hyper={
        "lr": hyper.lr, "batch_size": hyper.batch_size, "epochs": hyper.epochs,
        "seed": hyper.seed, "optimizer": hyper.optimizer,
        "val_fraction": hyper.val_fraction, "n_windows": n,
    })
    best_state = None
    t_start = time.perf_counter()
    for epoch in range(hyper.epochs):
        t_epoch = time.perf_counter()
        perm = train_idx[rng.permutation(train_idx.size)]
        running = 0.0
        seen = 0
        for lo in range(0, perm.size, hyper.batch_size):
            sel = perm[lo : lo + hyper.batch_size]
            x = dataset.windows[sel][:, None, :]
            y = dataset.targets[sel][:, None]
            pred = model.forward(x, train=True)
            loss, dpred = nn.mse_loss(pred, y)
            if not np.isfinite(loss):
                report.wall_seconds = time.perf_counter() - t_start
                raise TrainingDiverged(epoch - 1, report)
            opt.zero_grad()
            model.backward(dpred.astype(model.dtype))
            opt.step()
            running += loss * y.size
            seen += y.size
        train_loss = running / seen
        val_loss = (_eval_loss(model, dataset.windows[val_idx],
                               dataset.targets[val_idx], hyper.batch_size)
                    if n_val else train_loss)
        seconds = time.perf_counter() - t_epoch
        report.epochs.append((epoch, train_loss, val_loss, seconds))
        if not np.isfinite(val_loss):
            report.wall_seconds = time.perf_counter() - t_start
            raise TrainingDiverged(epoch - 1, report)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = model.state()
        if log:
            log(f"epoch {epoch}: train {train_loss:.3e}  val {val_loss:.3e}  "
                f"({seconds:.1f} s)")
    report.wall_seconds = time.perf_counter() - t_start
    if best_state is not None:
        model.load_state(best_state)
    return model, report


@dataclass
class StreamResult:
    """Corrected stream values; value i corresponds to aggregate index
    ``start + i`` of the input code stream."""

    values: np.ndarray
    start: int

    def aligned_with(self, full_length_array: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ref = full_length_array[self.start : self.start + len(self.values)]
        return ref, self.values


def infer_stream(
    model: NetworkModel,
    codes: np.ndarray,
    *,
    batch_size: int = 4096,
) -> StreamResult:
    """Apply the corrector to a code stream with the sliding-window buffer.

    Output k is defined for k in [current_index, len - (window - current_index)];
    the implied buffering latency is ``window - 1 - current_index`` samples.
    """
    wl = model.window_length
    if len(codes) < wl:
        raise CalibrationError(f"stream shorter than one window ({len(codes)} < {wl})")
    x = np.asarray(codes, dtype=np.float32) / model.norm_scale
    windows = np.lib.stride_tricks.sliding_window_view(x, wl)
    out = np.empty(windows.shape[0], dtype=np.float32)
    for lo in range(0, windows.shape[0], batch_size):
        block = np.ascontiguousarray(windows[lo : lo + batch_size])[:, None, :]
        out[lo : lo + block.shape[0]] = model.forward(block, train=False)[:, 0]
    return StreamResult(values=out, start=model.current_index)
