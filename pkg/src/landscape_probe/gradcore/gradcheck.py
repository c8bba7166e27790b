"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Parameter, Tensor, Tape, backward


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise FloatingPointError("grad_check: function returned a non-finite value")
    return v


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float,
                       index: Optional[Iterable[tuple]] = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``array`` (modified in place, then restored)."""
    grad = np.zeros_like(array, dtype=np.float64)
    coords = np.ndindex(array.shape) if index is None else index
    for idx in coords:
        orig = array[idx]
        array[idx] = orig + h
        fp = f()
        array[idx] = orig - h
        fm = f()
        array[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |analytic|) over all coordinates."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between the input gradient of ``f`` and central differences at ``point``."""
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    with Tape():
        out = f(x)
    _scalar(out)
    backward(out, wrt_input=True)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    probe = x.data.copy()

    def evaluate() -> float:
        return _scalar(f(Tensor(probe)))

    numeric = numerical_gradient(evaluate, probe, h)
    return relative_error(analytic, numeric)


def grad_check_params(f: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-5,
                      max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Same check for parameter gradients of a closure that rebuilds its forward pass.

    ``max_coords`` samples that many coordinates per parameter; ``None`` checks all.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape():
        out = f()
    _scalar(out)
    backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_coords is None or p.size <= max_coords:
            idx = None
        else:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, size=max_coords, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in flat]
        was = p.requires_grad
        p.requires_grad = False
        try:
            numeric = numerical_gradient(lambda: _scalar(f()), p.data, h, idx)
        finally:
            p.requires_grad = was
        if idx is not None:
            sel = tuple(np.array(i) for i in zip(*idx))
            worst = max(worst, relative_error(analytic[sel], numeric[sel]))
        else:
            worst = max(worst, relative_error(analytic, numeric))
    return worst
