"""Convolutional LSTM cell and the bidirectional block built from it.

Gate kernels are stored fused along the output-channel axis in the order
input, forget, output, candidate: ``w_x`` is [4*Chid, Cin, 3, 3], ``w_h`` is
[4*Chid, Chid, 3, 3] and ``bias`` is [4*Chid]. `gate_kernel` exposes the
per-gate views.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from .nn import Module, fan_in_uniform

GATES = ("i", "f", "o", "g")


class ConvLSTMCell(Module):
    def __init__(self, cin: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        super().__init__()
        self.cin = cin
        self.hidden = hidden
        self.w_x = Tensor(fan_in_uniform(rng, (4 * hidden, cin, 3, 3)), requires_grad=True)
        self.w_h = Tensor(fan_in_uniform(rng, (4 * hidden, hidden, 3, 3)), requires_grad=True)
        bias = np.zeros(4 * hidden, np.float32)
        bias[hidden:2 * hidden] = forget_bias
        self.bias = Tensor(bias, requires_grad=True)

    def gate_kernel(self, source: str, gate: str) -> np.ndarray:
        """View of one gate's kernel; `source` is "x" or "h"."""
        k = GATES.index(gate)
        w = self.w_x if source == "x" else self.w_h
        return w.data[k * self.hidden:(k + 1) * self.hidden]

    def gate_bias(self, gate: str) -> np.ndarray:
        k = GATES.index(gate)
        return self.bias.data[k * self.hidden:(k + 1) * self.hidden]

    def input_gates(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w_x, self.bias)

    def step(self, xg: Tensor, h: Optional[Tensor], c: Optional[Tensor]) -> tuple[Tensor, Tensor]:
        """Advance one position given precomputed input gates `xg`.

        ``h is None`` / ``c is None`` stand for all-zero initial states.
        """
        gates = xg if h is None else ops.add(xg, ops.conv2d(h, self.w_h))
        n = self.hidden
        hc = ops.lstm_update(gates, c)
        return ops.slice_axis(hc, 0, n), ops.slice_axis(hc, n, 2 * n)


def convlstm_cell_step(x: Tensor, h: Tensor, c: Tensor, cell: ConvLSTMCell) -> tuple[Tensor, Tensor]:
    """One ConvLSTM update on batched [N, C, H, W] tensors."""
    if h.shape != c.shape:
        raise ValueError(f"hidden state {h.shape} and cell state {c.shape} must share a shape")
    if h.shape[1] != cell.hidden or x.shape[0] != h.shape[0] or x.shape[2:] != h.shape[2:]:
        raise ValueError(f"state {h.shape} inconsistent with input {x.shape} and hidden size {cell.hidden}")
    return cell.step(cell.input_gates(x), h, c)


def run_direction(cell: ConvLSTMCell, seq: Sequence[Tensor], reverse: bool) -> list[Tensor]:
    order = range(len(seq) - 1, -1, -1) if reverse else range(len(seq))
    n = seq[0].shape[0]
    # input gates do not depend on the recurrence: one convolution for all positions
    xg = cell.input_gates(ops.concat(list(seq), axis=0)) if len(seq) > 1 else cell.input_gates(seq[0])
    out: list[Optional[Tensor]] = [None] * len(seq)
    h = c = None
    for t in order:
        h, c = cell.step(ops.slice_axis(xg, t * n, (t + 1) * n, axis=0), h, c)
        out[t] = h
    return out


class BiConvLSTM(Module):
    """Forward and backward ConvLSTM streams fused by elementwise sum."""

    def __init__(self, cin: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        super().__init__()
        self.fwd = ConvLSTMCell(cin, hidden, rng, forget_bias)
        self.bwd = ConvLSTMCell(cin, hidden, rng, forget_bias)

    def forward(self, seq: Sequence[Tensor]) -> list[Tensor]:
        if len(seq) == 0:
            raise ValueError("bidirectional ConvLSTM needs a sequence of length >= 1")
        hf = run_direction(self.fwd, seq, reverse=False)
        hb = run_direction(self.bwd, seq, reverse=True)
        return [ops.add(a, b) for a, b in zip(hf, hb)]


def biconvlstm_block(seq: Tensor, fwd: ConvLSTMCell, bwd: ConvLSTMCell) -> Tensor:
    """[T, Cin, H, W] -> [T, Chid, H, W] with both streams started from zero states."""
    if seq.shape[0] == 0:
        raise ValueError("bidirectional ConvLSTM needs a sequence of length >= 1")
    if fwd.hidden != bwd.hidden:
        raise ValueError("forward and backward cells must share the hidden size")
    T = seq.shape[0]
    steps = [ops.reshape(ops.take(seq, t, axis=0), (1,) + seq.shape[1:]) for t in range(T)]
    hf = run_direction(fwd, steps, reverse=False)
    hb = run_direction(bwd, steps, reverse=True)
    return ops.concat([ops.add(a, b) for a, b in zip(hf, hb)], axis=0)


def encoder_parameter_count(cin: int, channels: Sequence[int]) -> int:
    """Two directions x (8 gate kernels + 4 gate biases) per block."""
    total = 0
    for ch in channels:
        per_direction = 4 * ch * cin * 9 + 4 * ch * ch * 9 + 4 * ch
        total += 2 * per_direction
        cin = ch
    return total
