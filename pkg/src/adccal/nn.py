"""Minimal trainable-layer engine: Conv1d, BatchNorm1d, ReLU, LSTM, Linear,
MSE loss, and Adam/SGD optimizers, with hand-written backward passes.

Shapes follow the usual convention: convolution/batchnorm take
[batch, channels, length] (a channels-last fast path, used by the assembled
network, avoids layout churn between the convolution stack and the LSTM);
the LSTM works on [batch, time, features]. Training runs in float32;
gradient checking uses float64.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas as _blas

_EPS_BN = 1e-5
_BN_MOMENTUM = 0.1


class EngineError(ValueError):
    """Rejected input to an engine operation."""


class NonFiniteError(FloatingPointError):
    """A gradient or parameter stopped being finite."""


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5*(1 + tanh(x/2)): numpy's SIMD tanh is much faster than expit
    out = np.tanh(np.asarray(x) * 0.5)
    out *= 0.5
    out += 0.5
    return out


class Layer:
    """Base class: forward caches whatever backward needs."""

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a @ b for C-contiguous float32/float64 matrices, in place.

    Runs BLAS on the transposed view (C-order arrays are F-order transposes)
    so no copies are made.
    """
    gemm = _blas.sgemm if a.dtype == np.float32 else _blas.dgemm
    out = gemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=True)
    if not np.shares_memory(out, c):
        c[...] = out.T  # BLAS had to copy (non-contiguous c)


class Conv1d(Layer):
    """Stride-1 zero-padded 1-D convolution.

    ``data_format`` selects the public layout: 'ncl' ([batch, ch, length],
    the default) or 'nlc' (channels last, no transposes on the hot path).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 padding: int = 1, rng: np.random.Generator | None = None,
                 dtype=np.float32, data_format: str = "ncl",
                 input_grad: bool = True):
        if data_format not in ("ncl", "nlc"):
            raise EngineError(f"unknown data format '{data_format}'")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding
        self.data_format = data_format
        self.input_grad = input_grad
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_channels * kernel)
        self.weight = Parameter(
            "weight",
            rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel)).astype(dtype),
        )
        self.bias = Parameter("bias", np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        """Computed as one shifted large GEMM per kernel tap over the padded,
        batch-flattened input; the per-sample padding rows absorb kernel
        overhang so no window matrix is ever materialized."""
        if self.data_format == "ncl":
            if x.ndim != 3 or x.shape[1] != self.in_channels:
                raise EngineError(f"expected [B, {self.in_channels}, L], got {x.shape}")
            x = np.ascontiguousarray(x.transpose(0, 2, 1))
        elif x.ndim != 3 or x.shape[2] != self.in_channels:
            raise EngineError(f"expected [B, L, {self.in_channels}], got {x.shape}")
        b, length, c = x.shape
        k, p, o = self.kernel, self.padding, self.out_channels
        if length + 2 * p < k:
            raise EngineError("input shorter than the kernel")
        lp = length + 2 * p
        out_len = lp - k + 1
        xp = np.zeros((b * lp, c), dtype=x.dtype)
        xp.reshape(b, lp, c)[:, p : p + length, :] = x
        rows = b * lp - (k - 1)
        out = np.empty((b * lp, o), dtype=x.dtype)
        out[...] = self.bias.value
        w = self.weight.value
        for kk in range(k):
            _gemm_acc(xp[kk : kk + rows], np.ascontiguousarray(w[:, :, kk].T),
                      out[:rows])
        self._cache = (xp, (b, length, lp, out_len))
        out = out.reshape(b, lp, o)[:, :out_len, :]
        if self.data_format == "ncl":
            return np.ascontiguousarray(out.transpose(0, 2, 1))
        return np.ascontiguousarray(out)

    def backward(self, dout):
        xp, (b, length, lp, out_len) = self._cache
        if self.data_format == "ncl":
            dout = dout.transpose(0, 2, 1)
        k, p, c, o = self.kernel, self.padding, self.in_channels, self.out_channels
        dfull = np.zeros((b * lp, o), dtype=xp.dtype)
        dfull.reshape(b, lp, o)[:, :out_len, :] = dout
        rows = b * lp - (k - 1)
        dw = np.empty((o, c, k), dtype=xp.dtype)
        for kk in range(k):
            dw[:, :, kk] = dfull[:rows].T @ xp[kk : kk + rows]
        self.weight.grad += dw
        self.bias.grad += dfull[:rows].sum(axis=0)
        if not self.input_grad:
            return None
        dxp = np.zeros((b * lp, c), dtype=xp.dtype)
        for kk in range(k):
            _gemm_acc(dfull[:rows], np.ascontiguousarray(self.weight.value[:, :, kk]),
                      dxp[kk : kk + rows])
        dx = dxp.reshape(b, lp, c)[:, p : p + length, :]
        if self.data_format == "ncl":
            return np.ascontiguousarray(dx.transpose(0, 2, 1))
        return np.ascontiguousarray(dx)


class BatchNorm1d(Layer):
    """Per-channel normalization over (batch, length); same layout flag as Conv1d."""

    def __init__(self, channels: int, dtype=np.float32, data_format: str = "ncl"):
        if data_format not in ("ncl", "nlc"):
            raise EngineError(f"unknown data format '{data_format}'")
        self.channels = channels
        self.data_format = data_format
        self.gamma = Parameter("gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.batches_tracked = 0
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False):
        ch_axis = 1 if self.data_format == "ncl" else 2
        if x.ndim != 3 or x.shape[ch_axis] != self.channels:
            raise EngineError(f"expected {self.channels} channels on axis "
                              f"{ch_axis}, got {x.shape}")
        if self.data_format == "ncl":
            x = x.transpose(0, 2, 1)  # view; compute in [B, L, C]
        if train:
            n = x.shape[0] * x.shape[1]
            if n < 2:
                raise EngineError("batch statistics need at least 2 values per channel")
            s1 = np.einsum("blc->c", x, optimize=True)
            s2 = np.einsum("blc,blc->c", x, x, optimize=True)
            mean = s1 / n
            var = np.maximum(s2 / n - mean * mean, 0.0)
            self.running_mean = ((1 - _BN_MOMENTUM) * self.running_mean
                                 + _BN_MOMENTUM * mean).astype(self.running_mean.dtype)
            self.running_var = ((1 - _BN_MOMENTUM) * self.running_var
                                + _BN_MOMENTUM * var).astype(self.running_var.dtype)
            self.batches_tracked += 1
        else:
            if self.batches_tracked == 0:
                raise EngineError("inference before any running-statistics update")
            mean, var = self.running_mean, self.running_var
        ivar = (1.0 / np.sqrt(var + _EPS_BN)).astype(x.dtype)
        xhat = x - mean.astype(x.dtype)
        xhat *= ivar
        self._cache = (xhat, ivar, train)
        out = self.gamma.value * xhat + self.beta.value
        return out.transpose(0, 2, 1) if self.data_format == "ncl" else out

    def backward(self, dout):
        xhat, ivar, train = self._cache
        if self.data_format == "ncl":
            dout = dout.transpose(0, 2, 1)
        s1 = np.einsum("blc->c", dout, optimize=True)
        s2 = np.einsum("blc,blc->c", dout, xhat, optimize=True)
        self.gamma.grad += s2
        self.beta.grad += s1
        g = self.gamma.value * ivar
        if train:
            n = dout.shape[0] * dout.shape[1]
            dx = xhat * (-s2 / n)
            dx += dout
            dx -= s1 / n
            dx *= g
        else:
            dx = dout * g
        return dx.transpose(0, 2, 1) if self.data_format == "ncl" else dx


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class LSTM(Layer):
    """Single-layer LSTM returning the full hidden sequence.

    Gate order (i, f, g, o); one bias vector; fresh zero state per call;
    backward runs full BPTT over the window. ``time_major=True`` takes and
    returns [T, B, F] (contiguous per step, used on the training hot path);
    the default interface is [B, T, F].
    """

    def __init__(self, in_features: int, hidden: int,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 time_major: bool = False):
        self.in_features = in_features
        self.hidden = hidden
        self.time_major = time_major
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = Parameter(
            "w_ih", rng.uniform(-bound, bound, size=(4 * hidden, in_features)).astype(dtype))
        self.w_hh = Parameter(
            "w_hh", rng.uniform(-bound, bound, size=(4 * hidden, hidden)).astype(dtype))
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
        self.bias = Parameter("bias", bias)
        self._cache = None

    def params(self):
        return [self.w_ih, self.w_hh, self.bias]

    def forward(self, x, train=False):
        if self.time_major:
            if x.ndim != 3 or x.shape[2] != self.in_features:
                raise EngineError(f"expected [T, B, {self.in_features}], got {x.shape}")
            xt = x
        else:
            if x.ndim != 3 or x.shape[2] != self.in_features:
                raise EngineError(f"expected [B, T, {self.in_features}], got {x.shape}")
            xt = np.ascontiguousarray(x.transpose(1, 0, 2))
        t_len, b, _ = xt.shape
        hd = self.hidden
        # sigmoid(z) = 0.5*(1 + tanh(z/2)): halve the sigmoid-gate rows of the
        # weights up front so one full-width tanh pass covers every gate,
        # then map those columns back with slice-scalar affine passes
        half = np.ones(4 * hd, dtype=xt.dtype)
        half[: 2 * hd] = 0.5
        half[3 * hd :] = 0.5
        w_ih_half = self.w_ih.value.T * half
        w_hh_half = self.w_hh.value.T * half
        bias_half = self.bias.value * half
        pre = xt.reshape(-1, self.in_features) @ w_ih_half
        pre += bias_half
        pre = pre.reshape(t_len, b, 4 * hd)
        h = np.zeros((b, hd), dtype=xt.dtype)
        c = np.zeros((b, hd), dtype=xt.dtype)
        gates = np.empty((t_len, b, 4 * hd), dtype=xt.dtype)
        cells = np.empty((t_len, b, hd), dtype=xt.dtype)
        tanh_c = np.empty_like(cells)
        h_prev = np.empty_like(cells)
        buf = np.empty((b, 4 * hd), dtype=xt.dtype)
        tmp = np.empty((b, hd), dtype=xt.dtype)
        for t in range(t_len):
            h_prev[t] = h
            g = gates[t]
            np.matmul(h, w_hh_half, out=buf)
            buf += pre[t]
            np.tanh(buf, out=g)
            sig = g[:, : 2 * hd]
            sig *= 0.5
            sig += 0.5
            sig = g[:, 3 * hd :]
            sig *= 0.5
            sig += 0.5
            c_new = cells[t]
            np.multiply(g[:, hd : 2 * hd], c, out=c_new)
            np.multiply(g[:, :hd], g[:, 2 * hd : 3 * hd], out=tmp)
            c_new += tmp
            c = c_new
            tc = tanh_c[t]
            np.tanh(c, out=tc)
            h = g[:, 3 * hd :] * tc
        self._cache = (xt, gates, cells, tanh_c, h_prev)
        out = np.concatenate([h_prev[1:], h[None]], axis=0)
        if self.time_major:
            return out
        return np.ascontiguousarray(out.transpose(1, 0, 2))

    def backward(self, dout):
        xt, gates, cells, tanh_c, h_prev = self._cache
        t_len, b, _ = xt.shape
        hd = self.hidden
        if not self.time_major:
            dout = np.ascontiguousarray(dout.transpose(1, 0, 2))
        dh_next = np.zeros((b, hd), dtype=xt.dtype)
        dc_next = np.zeros_like(dh_next)
        dpre_all = np.empty((t_len, b, 4 * hd), dtype=xt.dtype)
        for t in range(t_len - 1, -1, -1):
            g = gates[t]
            i_g, f_g = g[:, :hd], g[:, hd : 2 * hd]
            g_g, o_g = g[:, 2 * hd : 3 * hd], g[:, 3 * hd :]
            tc = tanh_c[t]
            dh = dout[t] + dh_next
            dc = dh * o_g
            dc *= 1.0 - tc * tc
            dc += dc_next
            dpre = dpre_all[t]
            np.multiply(dc, g_g, out=dpre[:, :hd])
            dpre[:, :hd] *= i_g - i_g * i_g
            if t > 0:
                np.multiply(dc, cells[t - 1], out=dpre[:, hd : 2 * hd])
                dpre[:, hd : 2 * hd] *= f_g - f_g * f_g
            else:
                dpre[:, hd : 2 * hd] = 0.0
            np.multiply(dc, i_g, out=dpre[:, 2 * hd : 3 * hd])
            dpre[:, 2 * hd : 3 * hd] *= 1.0 - g_g * g_g
            np.multiply(dh, tc, out=dpre[:, 3 * hd :])
            dpre[:, 3 * hd :] *= o_g - o_g * o_g
            np.multiply(dc, f_g, out=dc_next)
            dh_next = dpre @ self.w_hh.value
        flat = dpre_all.reshape(-1, 4 * hd)
        xflat = xt.reshape(-1, self.in_features)
        self.w_ih.grad += flat.T @ xflat
        self.w_hh.grad += np.einsum("tbi,tbj->ij", dpre_all, h_prev, optimize=True)
        self.bias.grad += flat.sum(axis=0)
        dx = (flat @ self.w_ih.value).reshape(t_len, b, self.in_features)
        if self.time_major:
            return dx
        return np.ascontiguousarray(dx.transpose(1, 0, 2))


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(
            "weight", rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype))
        self.bias = Parameter("bias", np.zeros(out_features, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise EngineError(f"expected [B, {self.in_features}], got {x.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dout):
        x = self._cache
        self.weight.grad += dout.T @ x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise EngineError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


class _FusedState:
    """Views every parameter (and its gradient) into one flat buffer so the
    optimizer update is a handful of vector operations."""

    def __init__(self, params: list[Parameter]):
        self.params = params
        dtypes = {p.value.dtype for p in params}
        self.fused = len(dtypes) == 1 and len(params) > 1
        if not self.fused:
            self.values = None
            return
        dtype = dtypes.pop()
        total = sum(p.value.size for p in params)
        self.values = np.empty(total, dtype=dtype)
        self.grads = np.zeros(total, dtype=dtype)
        offset = 0
        for p in params:
            n = p.value.size
            self.values[offset : offset + n] = p.value.ravel()
            p.value = self.values[offset : offset + n].reshape(p.value.shape)
            p.grad = self.grads[offset : offset + n].reshape(p.value.shape)
            offset += n

    def find_nonfinite(self) -> str:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                return f"non-finite gradient in parameter '{p.name}'"
            if not np.all(np.isfinite(p.value)):
                return f"non-finite value in parameter '{p.name}'"
        return "non-finite state"


class Adam:
    """Standard Adam with bias correction; aborts on non-finite gradients."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._state = _FusedState(params)
        self.params = params
        if self._state.fused:
            self._pairs = [(self._state.values, self._state.grads)]
        else:
            self._pairs = [(p.value, p.grad) for p in params]
        self.m = [np.zeros_like(v) for v, _ in self._pairs]
        self.v = [np.zeros_like(v) for v, _ in self._pairs]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, (value, grad) in enumerate(self._pairs):
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(self._state.find_nonfinite())
            m = self.m[i]
            v = self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if not np.all(np.isfinite(value)):
                raise NonFiniteError(self._state.find_nonfinite())

    def zero_grad(self):
        for _, grad in self._pairs:
            grad[...] = 0.0


class SGD:
    """Plain stochastic gradient descent (kept selectable in configs)."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3):
        self.params = params
        self._state = _FusedState(params)
        if self._state.fused:
            self._pairs = [(self._state.values, self._state.grads)]
        else:
            self._pairs = [(p.value, p.grad) for p in params]
        self.lr = lr

    def step(self):
        for value, grad in self._pairs:
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(self._state.find_nonfinite())
            value -= self.lr * grad

    def zero_grad(self):
        for _, grad in self._pairs:
            grad[...] = 0.0


def gradcheck(layer: Layer, x: np.ndarray, h: float = 1e-5,
              train: bool = True, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Projects the layer output onto a fixed random vector to form a scalar,
    then checks the gradient of that scalar with respect to the input and
    every parameter. Run layers in float64 for meaningful results.
    """
    rng = rng or np.random.default_rng(1234)
    proj = rng.standard_normal(layer.forward(x, train=train).shape)

    def scalar():
        return float(np.sum(layer.forward(x, train=train) * proj))

    for p in layer.params():
        p.zero_grad()
    out = layer.forward(x, train=train)
    dx = layer.backward(proj.astype(out.dtype))

    worst = 0.0

    def compare(analytic, value):
        nonlocal worst
        num = np.empty_like(analytic, dtype=np.float64)
        flat_v = value.ravel()
        flat_n = num.ravel()
        for j in range(flat_v.size):
            orig = flat_v[j]
            flat_v[j] = orig + h
            fp = scalar()
            flat_v[j] = orig - h
            fm = scalar()
            flat_v[j] = orig
            flat_n[j] = (fp - fm) / (2.0 * h)
        denom = max(1.0, float(np.max(np.abs(analytic))), float(np.max(np.abs(num))))
        worst = max(worst, float(np.max(np.abs(analytic - num))) / denom)

    compare(dx, x)
    for p in layer.params():
        compare(p.grad.copy(), p.value)
    return worst
