"""Differentiable primitives.

Layouts are NCHW for 2-d ops. Each op computes in the dtype of its inputs
(float32 in production, float64 when a finite-difference oracle replays
the forward pass).
"""
from __future__ import annotations

import builtins
import contextlib
import threading
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, current_tape, needs_record


class _DecisionLog(threading.local):
    entries: Optional[list] = None


_decisions = _DecisionLog()


@contextlib.contextmanager
def record_decisions() -> Iterator[list]:
    """Collect the discrete branch choices (ReLU masks, max-pool argmaxes)
    made by ops inside the block; finite-difference checks use them to
    detect steps that cross a kink."""
    prev = _decisions.entries
    _decisions.entries = log = []
    try:
        yield log
    finally:
        _decisions.entries = prev


def _log_decision(arr: np.ndarray) -> None:
    if _decisions.entries is not None:
        _decisions.entries.append(arr.copy())


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if needs_record(*inputs):
        out.requires_grad = True
        current_tape().record(op, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the numpy name
    shape, dtype = a.shape, a.dtype
    return _result("sum", np.asarray(a.data.sum(), dtype=dtype),
                   (a,), lambda g: (np.broadcast_to(g, shape).astype(dtype),))


def mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.data.size
    return _result("mean", np.asarray(a.data.mean(), dtype=dtype),
                   (a,), lambda g: (np.broadcast_to(g / n, shape).astype(dtype),))


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inverse),))


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slab [start, stop) along `axis`."""
    index = [builtins.slice(None)] * a.ndim
    index[axis] = builtins.slice(start, stop)
    index = tuple(index)

    def bw(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[index] = g
        return (ga,)

    return _result("slice", a.data[index], (a,), bw)


def take(a: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select one index along `axis`, dropping that axis."""
    def bw(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        idx = [builtins.slice(None)] * a.ndim
        idx[axis] = i
        ga[tuple(idx)] = g
        return (ga,)

    return _result("take", np.take(a.data, i, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(tensors)))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _result("stack", np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# -- convolution and resampling ----------------------------------------------

def _im2col(xd: np.ndarray, k: int) -> np.ndarray:
    """Same-padded patches of NCHW `xd` as a [C*k*k, N*H*W] matrix."""
    n, c, h, w = xd.shape
    p = k // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, h, w), dtype=xd.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(c * k * k, n * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    n, c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    gp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            gp[:, :, dy:dy + h, dx:dx + w] += cols[:, dy, dx]
    return gp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded 2-d cross-correlation with an odd square kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ValueError(f"conv2d: weight {weight.shape} expects {cin} input channels, input {x.shape} has {c}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd and square, got {k}x{k2}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    cols = _im2col(x.data, k)
    w2 = weight.data.reshape(cout, c * k * k)
    out = w2 @ cols  # cout, n*h*w
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = _col2im(w2.T @ g2, (n, c, h, w), k) if x.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    return _result("conv2d", out, inputs, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pool; ties resolve to the row-major-first cell."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    _log_decision(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result("maxpool2", out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result("upsample_nearest2", out, (x,),
                   lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# -- normalization ----------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance tracked by batch norm."""

    mean: np.ndarray
    var: np.ndarray
    batches: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def empty(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), 0, momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: Optional[RunningStats],
                training: bool) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} do not match {c} channels")
    eps = running.eps if running is not None else 1e-5
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    count = n * h * w

    if training:
        if count < 2:
            raise ValueError("batchnorm2d: training needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        if running is not None:
            m = running.momentum
            running.mean[...] = (1 - m) * running.mean + m * mu.reshape(c)
            running.var[...] = (1 - m) * running.var + m * var.reshape(c) * (count / (count - 1))
            running.batches += 1
    else:
        if running is None or running.batches == 0:
            raise RuntimeError("batchnorm2d: no running statistics recorded yet; "
                               "run a training-mode pass or load a checkpoint before eval mode")
        mu = running.mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = running.var.reshape(1, c, 1, 1).astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv_std
    out = xhat * gd + bd

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                gx = inv_std / count * (count * dxhat
                                        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return _result("batchnorm2d", out, (x, gamma, beta), bw)


# -- nonlinearities ---------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_decision(mask)
    return _result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1 - y * y),))


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def lstm_update(gates: Tensor, c: Optional[Tensor]) -> Tensor:
    """Fused LSTM state update.

    `gates` holds pre-activations [N, 4n, ...] in the order i, f, o, g; `c` is
    the previous cell state [N, n, ...] or None for zeros. Returns
    concat(h', c') along axis 1, with c' = f*c + i*g and h' = o*tanh(c').
    """
    n4 = gates.shape[1]
    if n4 % 4:
        raise ValueError(f"lstm_update: gate channels {n4} not divisible by 4")
    n = n4 // 4
    if c is not None and (c.shape[1] != n or c.shape[0] != gates.shape[0] or c.shape[2:] != gates.shape[2:]):
        raise ValueError(f"lstm_update: cell state {c.shape} does not match gates {gates.shape}")
    gd = gates.data
    s = _sigmoid(gd[:, :3 * n])
    i, f, o = s[:, :n], s[:, n:2 * n], s[:, 2 * n:]
    g = np.tanh(gd[:, 3 * n:])
    c_new = i * g if c is None else f * c.data + i * g
    tc = np.tanh(c_new)
    out = np.concatenate([o * tc, c_new], axis=1)
    inputs = (gates,) if c is None else (gates, c)

    def bw(grad):
        gh, gc = grad[:, :n], grad[:, n:]
        dc = gc + gh * o * (1 - tc * tc)
        dgates = np.empty_like(gd)
        dgates[:, :n] = dc * g * i * (1 - i)
        dgates[:, 2 * n:3 * n] = gh * tc * o * (1 - o)
        dgates[:, 3 * n:] = dc * i * (1 - g * g)
        if c is None:
            dgates[:, n:2 * n] = 0
            return (dgates,)
        dgates[:, n:2 * n] = dc * c.data * f * (1 - f)
        return dgates, dc * f

    return _result("lstm_update", out, inputs, bw)


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(ACTIVATIONS)}") from None
    return fn(x)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -- loss ---------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy in the overflow-free form."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if y.shape != logits.shape:
        raise ValueError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    z = logits.data
    y = y.astype(z.dtype)
    n = z.size
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean(dtype=np.float64), dtype=z.dtype)
    return _result("bce_with_logits", loss, (logits,),
                   lambda g: ((_sigmoid(z) - y) * (g / n),))
