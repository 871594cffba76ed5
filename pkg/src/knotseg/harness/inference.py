"""Eval-mode prediction: one volume at a time, or a whole tree by sliding window."""
from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, no_grad
from ..autodiff.ops import _sigmoid
from ..models.architectures import SegmentationNet


def model_input(contour: np.ndarray) -> np.ndarray:
    """[T,H,W] or [B,T,H,W] binary stack -> float32 network input with a channel axis."""
    return np.expand_dims(np.asarray(contour, dtype=np.float32), -3)


def predict_logits(model: SegmentationNet, contours: np.ndarray) -> np.ndarray:
    """Eval-mode logits for a batch [B,T,H,W] of contour stacks; returns [B,T,H,W]."""
    model.eval()
    with no_grad():
        out = model(Tensor(model_input(contours))).data
    return out[..., 0, :, :]


def predict_volume(model: SegmentationNet, contour: np.ndarray) -> np.ndarray:
    """Knot probabilities (float32) for one [T,H,W] contour stack."""
    return _sigmoid(predict_logits(model, contour[None])[0]).astype(np.float32)


def window_starts(z: int, window: int, stride: int = 1) -> list[int]:
    """Window origins; a final window is added flush with the end when the stride would skip the tail."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if z < window:
        raise ValueError(f"tree has {z} slices, fewer than the window of {window}; "
                         f"pad the stack or use the desk preset's shorter window")
    starts = list(range(0, z - window + 1, stride))
    if starts[-1] + window < z:
        starts.append(z - window)
    return starts


def coverage_counts(z: int, window: int, stride: int = 1) -> np.ndarray:
    counts = np.zeros(z, dtype=np.int64)
    for s in window_starts(z, window, stride):
        counts[s:s + window] += 1
    return counts


def sliding_window_predict(tree_slices: np.ndarray, model: SegmentationNet, window: int = 40, stride: int = 1,
                           batch_size: int = 1) -> np.ndarray:
    """Coverage-averaged sigmoid probabilities over all windows of a [Z,H,W] (or [Z,1,H,W]) stack.

    Returns float32 probabilities shaped like the input.
    """
    stack = np.asarray(tree_slices)
    squeeze = stack.ndim == 4
    if squeeze:
        if stack.shape[1] != 1:
            raise ValueError(f"expected [Z,1,H,W], got {stack.shape}")
        stack = stack[:, 0]
    z = stack.shape[0]
    starts = window_starts(z, window, stride)
    total = np.zeros(stack.shape, dtype=np.float64)
    for b in range(0, len(starts), batch_size):
        chunk = starts[b:b + batch_size]
        probs = _sigmoid(predict_logits(model, np.stack([stack[s:s + window] for s in chunk])))
        for s, p in zip(chunk, probs):
            total[s:s + window] += p
    out = (total / coverage_counts(z, window, stride)[:, None, None]).astype(np.float32)
    return out[:, None] if squeeze else out
