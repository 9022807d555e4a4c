"""Layers with hand-written backward passes.

Sequence tensors are laid out ``(N, L, C)``: batch, time, channel. A layer
caches what its backward pass needs during ``forward`` and accumulates
parameter gradients into ``Param.grad`` during ``backward``.
"""
from __future__ import annotations

import contextlib
import hashlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError, UninitializedStatsError


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _channel_sums(a: np.ndarray) -> np.ndarray:
    """Per-channel sums of an (N, L, C) array.

    Rows are added one batch item at a time, then the L partial sums are
    reduced pairwise. A plain ``sum`` over the flattened (N*L, C) view adds
    row by row (error ~ eps*N*L), which makes batch statistics jitter under
    tiny parameter changes and spoils finite-difference checks.
    """
    n, L, c = a.shape
    per_pos = a.reshape(n, L * c).sum(axis=0).reshape(L, c)
    return np.ascontiguousarray(per_pos.T).sum(axis=1)


_kink_log = None


@contextlib.contextmanager
def track_kinks():
    """Collect fingerprints of every ReLU mask and pool argmax computed inside
    the block. Two forward passes with equal fingerprints lie on the same
    smooth piece of the network."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _tracking() -> bool:
    return _kink_log is not None


def _log_kink(arr):
    _kink_log.append(hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest())


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Layer:
    """Base class; stateless layers only override forward/backward."""

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must survive a checkpoint."""
        return {}

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        pass

    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


def _check_3d(x, what):
    if x.ndim != 3:
        raise ShapeError(f"{what} expects (N, L, C) input, got shape {x.shape}")


class Conv1D(Layer):
    """Same-padded 1-D cross-correlation.

    For even kernels the extra padding sample goes on the right.
    ``input_grad=False`` skips the input gradient (first layer of a net).
    """

    def __init__(self, name, c_in, c_out, kernel, rng=None, input_grad=True, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        self.W = Param(f"{name}.W", glorot_uniform(rng, (kernel, c_in, c_out), kernel * c_in, kernel * c_out))
        self.b = Param(f"{name}.b", np.zeros(c_out)) if bias else None
        self.input_grad = input_grad
        self.pad = ((kernel - 1) // 2, kernel - 1 - (kernel - 1) // 2)

    def params(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def forward(self, x, training=False):
        _check_3d(x, "conv1d")
        if x.shape[2] != self.c_in:
            raise ShapeError(f"conv1d expects {self.c_in} input channels, got {x.shape[2]}")
        n, L, _ = x.shape
        k = self.k
        if k == 1:
            cols = x.reshape(n * L, self.c_in)
        else:
            xp = np.pad(x, ((0, 0), self.pad, (0, 0)))
            win = sliding_window_view(xp, k, axis=1)  # (n, L, c_in, k)
            cols = self._workspace("cols", (n * L, k * self.c_in))
            np.copyto(cols.reshape(n, L, k, self.c_in), win.transpose(0, 1, 3, 2))
        self._cols, self._shape = cols, x.shape
        y = cols @ self.W.value.reshape(k * self.c_in, self.c_out)
        if self.b is not None:
            y += self.b.value
        return y.reshape(n, L, self.c_out)

    def _workspace(self, key, shape):
        # Column matrices run to tens of MB; reusing one buffer per layer
        # avoids paying fresh page faults on every call.
        ws = self.__dict__.setdefault("_ws", {})
        buf = ws.get(key)
        if buf is None or buf.shape != shape:
            buf = ws[key] = np.empty(shape)
        return buf

    def backward(self, dy):
        n, L, _ = self._shape
        k = self.k
        d2 = dy.reshape(n * L, self.c_out)
        self.W.grad += (self._cols.T @ d2).reshape(self.W.value.shape)
        if self.b is not None:
            self.b.grad += d2.sum(axis=0)
        if not self.input_grad:
            return None
        Wm = self.W.value.reshape(k * self.c_in, self.c_out)
        if k == 1:
            return (d2 @ Wm.T).reshape(n, L, self.c_in)
        # dx is dy correlated with the tap-reversed, transposed kernel; the
        # padding swaps sides so the output stays aligned
        dyp = np.pad(dy, ((0, 0), self.pad[::-1], (0, 0)))
        win = sliding_window_view(dyp, k, axis=1)  # (n, L, c_out, k)
        dcols = self._workspace("dcols", (n * L, k * self.c_out))
        np.copyto(dcols.reshape(n, L, k, self.c_out), win.transpose(0, 1, 3, 2))
        Wr = self.W.value[::-1].transpose(0, 2, 1).reshape(k * self.c_out, self.c_in)
        return (dcols @ Wr).reshape(n, L, self.c_in)


class MaxPool1D(Layer):
    """Non-overlapping max pooling; ties route the gradient to the first index."""

    def __init__(self, pool=2):
        self.pool = pool

    def forward(self, x, training=False):
        _check_3d(x, "maxpool1d")
        n, L, c = x.shape
        if L % self.pool:
            raise ShapeError(f"length {L} not divisible by pool {self.pool}")
        xr = x.reshape(n, L // self.pool, self.pool, c)
        # running max over the window; strict '>' keeps the first index on ties
        if self.pool == 2:
            a, b = xr[:, :, 0, :], xr[:, :, 1, :]
            out = np.maximum(a, b)
            idx = np.greater(b, a).view(np.int8)
        else:
            out = xr[:, :, 0, :].copy()
            idx = np.zeros(out.shape, dtype=np.int8)
            for j in range(1, self.pool):
                cand = xr[:, :, j, :]
                better = cand > out
                np.copyto(out, cand, where=better)
                np.copyto(idx, np.int8(j), where=better)
        if _tracking():
            _log_kink(idx)
        self._idx, self._shape = idx, x.shape
        return out

    def backward(self, dy):
        n, L, c = self._shape
        dx = np.empty((n, L // self.pool, self.pool, c))
        if self.pool == 2:
            first = self._idx == 0
            np.multiply(dy, first, out=dx[:, :, 0, :])
            np.subtract(dy, dx[:, :, 0, :], out=dx[:, :, 1, :])
        else:
            for j in range(self.pool):
                np.multiply(dy, self._idx == j, out=dx[:, :, j, :])
        return dx.reshape(n, L, c)


class ReLU(Layer):
    def forward(self, x, training=False):
        self._mask = x > 0
        if _tracking():
            _log_kink(np.packbits(self._mask))
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout; masks come from the generator passed at construction."""

    def __init__(self, rate, rng=None):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep) * (1.0 / keep)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class BatchNorm1D(Layer):
    """Per-channel normalization over the (N, L) axes.

    Running statistics follow ``r <- momentum * r + (1 - momentum) * batch``;
    the first training batch initializes them.
    """

    def __init__(self, name, channels, momentum=0.9, eps=1e-5):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.momentum, self.eps = momentum, eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = False

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
            f"{self.name}.initialized": np.array([float(self.initialized)]),
        }

    def load_buffers(self, bufs):
        self.running_mean = np.array(bufs[f"{self.name}.running_mean"], dtype=np.float64)
        self.running_var = np.array(bufs[f"{self.name}.running_var"], dtype=np.float64)
        self.initialized = bool(bufs[f"{self.name}.initialized"][0])

    def forward(self, x, training=False):
        _check_3d(x, "batchnorm1d")
        n, L, c = x.shape
        # per-channel vectors are tiled along L so broadcasts run over long rows
        xw = x.reshape(n, L * c)
        if training:
            m = n * L
            mu = _channel_sums(x) / m
            xc = xw - np.tile(mu, L)
            var = _channel_sums(np.square(xc).reshape(x.shape)) / m
            if self.initialized:
                r = self.momentum
                self.running_mean = r * self.running_mean + (1 - r) * mu
                self.running_var = r * self.running_var + (1 - r) * var
            else:
                self.running_mean, self.running_var = mu.copy(), var.copy()
                self.initialized = True
        else:
            if not self.initialized:
                raise UninitializedStatsError(
                    f"{self.name}: inference requested before any training batch"
                )
            xc = xw - np.tile(self.running_mean, L)
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = np.multiply(xc, np.tile(inv, L), out=xc)
        self._xhat, self._inv, self._training = xhat, inv, training
        y = xhat * np.tile(self.gamma.value, L)
        y += np.tile(self.beta.value, L)
        return y.reshape(x.shape)

    def backward(self, dy):
        n, L, c = dy.shape
        d2 = dy.reshape(n, L * c)
        xhat = self._xhat
        scale = self.gamma.value * self._inv
        tmp = d2 * xhat
        sum_dy = _channel_sums(dy)
        sum_dy_xhat = _channel_sums(tmp.reshape(dy.shape))
        self.beta.grad += sum_dy
        self.gamma.grad += sum_dy_xhat
        dx = d2 * np.tile(scale, L)
        if self._training:
            # dx = gamma*inv * (dy - mean(dy) - xhat * mean(dy * xhat))
            m = n * L
            dx -= np.multiply(xhat, np.tile(scale * sum_dy_xhat / m, L), out=tmp)
            dx -= np.tile(scale * sum_dy / m, L)
        return dx.reshape(dy.shape)


class Dense(Layer):
    def __init__(self, name, d_in, d_out, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W = Param(f"{name}.W", glorot_uniform(rng, (d_in, d_out), d_in, d_out))
        self.b = Param(f"{name}.b", np.zeros(d_out))

    def params(self):
        return [self.W, self.b]

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.W.value.shape[0]:
            raise ShapeError(f"dense expects (B, {self.W.value.shape[0]}), got {x.shape}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dy):
        self.W.grad += self._x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class UpSample1D(Layer):
    """Nearest-neighbour repetition along time."""

    def __init__(self, factor):
        self.factor = factor

    def forward(self, x, training=False):
        _check_3d(x, "upsample1d")
        self._shape = x.shape
        return np.repeat(x, self.factor, axis=1) if self.factor > 1 else x

    def backward(self, dy):
        n, L, c = self._shape
        blocks = dy.reshape(n, L, self.factor, c)
        out = blocks[:, :, 0, :].copy()
        for j in range(1, self.factor):
            out += blocks[:, :, j, :]
        return out


class LSTM(Layer):
    """Single-layer LSTM with packed gates in (i, f, g, o) order.

    ``W`` is (D, 4H), ``U`` is (H, 4H), ``b`` is (4H). The state starts at
    zero; ``forward`` returns the whole hidden sequence (N, T, H) and
    ``backward`` takes its gradient, running full backpropagation through
    time.
    """

    def __init__(self, name, d_in, hidden, rng=None, input_grad=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden
        self.d_in, self.H = d_in, H
        self.W = Param(f"{name}.W", glorot_uniform(rng, (d_in, 4 * H), d_in, 4 * H))
        self.U = Param(f"{name}.U", glorot_uniform(rng, (H, 4 * H), H, 4 * H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget-gate bias
        self.b = Param(f"{name}.b", b)
        self.input_grad = input_grad

    def params(self):
        return [self.W, self.U, self.b]

    def forward(self, x, training=False):
        _check_3d(x, "lstm")
        n, T, D = x.shape
        if D != self.d_in:
            raise ShapeError(f"lstm expects input size {self.d_in}, got {D}")
        H = self.H
        xw = (x.reshape(n * T, D) @ self.W.value).reshape(n, T, 4 * H) + self.b.value
        U = self.U.value
        gates = np.empty((T, n, 4 * H))
        cs = np.empty((T + 1, n, H))
        hs = np.empty((T + 1, n, H))
        tcs = np.empty((T, n, H))
        cs[0] = 0.0
        hs[0] = 0.0
        for t in range(T):
            z = xw[:, t] + hs[t] @ U
            g = gates[t]
            g[:, :2 * H] = sigmoid(z[:, :2 * H])
            g[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
            g[:, 3 * H:] = sigmoid(z[:, 3 * H:])
            cs[t + 1] = g[:, H:2 * H] * cs[t] + g[:, :H] * g[:, 2 * H:3 * H]
            tcs[t] = np.tanh(cs[t + 1])
            hs[t + 1] = g[:, 3 * H:] * tcs[t]
        self._x, self._gates, self._cs, self._hs, self._tcs = x, gates, cs, hs, tcs
        return hs[1:].transpose(1, 0, 2).copy()

    def backward(self, dhs):
        x, gates, cs, hs, tcs = self._x, self._gates, self._cs, self._hs, self._tcs
        n, T, D = x.shape
        H = self.H
        U = self.U.value
        dz_all = np.empty((n, T, 4 * H))
        dh_next = np.zeros((n, H))
        dc_next = np.zeros((n, H))
        for t in range(T - 1, -1, -1):
            g = gates[t]
            i, f, gg, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            dh = dhs[:, t] + dh_next
            tc = tcs[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ U.T
        dz2 = dz_all.reshape(n * T, 4 * H)
        self.U.grad += hs[:-1].reshape(T * n, H).T @ dz_all.transpose(1, 0, 2).reshape(T * n, 4 * H)
        self.W.grad += x.reshape(n * T, D).T @ dz2
        self.b.grad += dz2.sum(axis=0)
        if not self.input_grad:
            return None
        return (dz2 @ self.W.value.T).reshape(n, T, D)
