"""Central finite-difference gradient checking.

The numeric side replays the forward pass in float64 under `no_grad`, so it
never touches the tape the analytic side is checked against.

ReLU and max-pool make the loss piecewise smooth. A central difference whose
two probes land in different pieces does not estimate the derivative at the
base point, so every probe also records the discrete decisions taken by the
ops; when a decision flips within +-h the step is shrunk (by 10x, down to
`min_h`) until both probes stay in the base point's piece.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import record_decisions
from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error.

    `floor` bounds the denominator from below so that gradients which vanish
    identically (e.g. a conv bias feeding train-mode batch norm) compare on
    an absolute scale instead of dividing round-off by ~0.
    """
    a = np.asarray(analytic, np.float64).ravel()
    b = np.asarray(numeric, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _probe(f: Callable[[], float]) -> tuple[float, list]:
    with no_grad(), record_decisions() as log:
        value = f()
    return value, log


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def central_difference(f: Callable[[], float], flat: np.ndarray, i: int, h: float = 1e-3,
                       min_h: float = 1e-7, base: list | None = None) -> tuple[float, float]:
    """d f / d flat[i]; returns (estimate, step actually used)."""
    if base is None:
        _, base = _probe(f)
    orig = flat[i]
    step = h
    while True:
        flat[i] = orig + step
        fp, dp = _probe(f)
        flat[i] = orig - step
        fm, dm = _probe(f)
        flat[i] = orig
        if (_same(dp, base) and _same(dm, base)) or step / 10 < min_h:
            return (fp - fm) / (2 * step), step
        step /= 10


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d f / d arr by central differences; `arr` is perturbed in place and restored."""
    _, base = _probe(f)
    flat = arr.reshape(-1)
    return np.array([central_difference(f, flat, i, h, base=base)[0]
                     for i in range(flat.size)]).reshape(arr.shape)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> list[float]:
    """Compare analytic (float32) and numeric (float64) gradients of scalar `fn(*tensors)`.

    Returns one relative error per input.
    """
    leaves = [Tensor(np.asarray(x, np.float32), requires_grad=True) for x in inputs]
    fn(*leaves).backward()
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in leaves]

    hi = [np.array(x, dtype=np.float64) for x in inputs]

    def f() -> float:
        return fn(*[Tensor(a, dtype=np.float64) for a in hi]).item()

    return [relative_error(a, numeric_grad(f, arr, h)) for a, arr in zip(analytic, hi)]


def check_module_gradients(module, loss_fn: Callable[[], Tensor], h: float = 1e-3,
                           max_coords: int | None = None,
                           rng: np.random.Generator | None = None) -> dict[str, float]:
    """Per-parameter relative error of `module`'s analytic gradients.

    Both sides run in float64 so the comparison isolates the backward rules
    from float32 round-off. `loss_fn` must rebuild the scalar loss from
    scratch and be deterministic (reseed any dropout rng). With `max_coords`,
    each parameter is checked on a random subset of at most that many
    coordinates.
    """
    params = module.parameters()
    rng = rng or np.random.default_rng(0)
    module.to_dtype(np.float64)
    try:
        loss_fn().backward()
        analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}
        module.zero_grad()

        def f() -> float:
            return loss_fn().item()

        _, base = _probe(f)
        errors = {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
            numeric = np.array([central_difference(f, flat, i, h, base=base)[0] for i in idx])
            errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    finally:
        module.to_dtype(np.float32)
    return errors
