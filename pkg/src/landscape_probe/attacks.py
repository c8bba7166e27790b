"""Iterative l-infinity white-box attacks in the (expanded) input space.

All attacks ascend the summed per-sample cross-entropy, so each sample's
gradient is its own. Parameters are frozen while attacking; the projection
that resets auxiliary pixels is never part of the attacked function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .gradcore import Tape, Tensor, backward, per_sample_cross_entropy, softmax_cross_entropy
from .model.net import Model

KINDS = ("PGD", "BIM", "APGD")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "PGD"
    epsilon: float = 8 / 255
    alpha: Optional[float] = None
    steps: Optional[int] = None
    random_start: Optional[bool] = None
    box: tuple = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps is None:
            object.__setattr__(self, "steps", 10 if kind == "BIM" else 20)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha is None:
            if kind == "PGD":
                alpha = min(2 / 255, self.epsilon)
            elif kind == "BIM":
                alpha = self.epsilon / self.steps
            else:
                alpha = 2 * self.epsilon  # initial APGD step; halved adaptively
            object.__setattr__(self, "alpha", alpha)
        if self.random_start is None:
            object.__setattr__(self, "random_start", kind != "BIM")
        if kind == "BIM" and self.random_start:
            raise ValueError("BIM never uses a random start")
        if kind != "APGD" and self.epsilon > 0 and not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"step size must satisfy 0 < alpha <= epsilon, got {self.alpha} vs {self.epsilon}")
        lo, hi = self.box
        if not lo < hi:
            raise ValueError(f"box lower bound must be below upper bound, got {self.box}")
        object.__setattr__(self, "box", (float(lo), float(hi)))

    def with_box(self, box) -> "AttackSpec":
        return replace(self, box=tuple(box))


@dataclass
class TraceStep:
    step: int
    loss: np.ndarray  # per-sample loss at this iterate
    summary: Optional[object] = None


@dataclass
class AdvResult:
    adversarial: np.ndarray
    trace: list = field(default_factory=list)
    success: Optional[np.ndarray] = None
    final_loss: Optional[np.ndarray] = None
    best_loss_history: Optional[np.ndarray] = None  # APGD only, (steps + 1, N)


def linf_project(x_adv: np.ndarray, x0: np.ndarray, eps: float, box=(0.0, 1.0)) -> np.ndarray:
    """Clamp into the eps-ball around ``x0``, then into the box."""
    x_adv = np.asarray(x_adv)
    x0 = np.asarray(x0)
    if x_adv.shape != x0.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x0.shape}")
    lo, hi = _ball_bounds(x0, eps)
    out = np.minimum(np.maximum(x_adv, lo), hi)
    return np.clip(out, box[0], box[1]).astype(x0.dtype, copy=False)


def _ball_bounds(x0: np.ndarray, eps: float) -> tuple:
    """x0 -/+ eps in x0's dtype, moved inward wherever rounding left them outside the exact ball.

    The check is exact for float32 inputs (their differences are exact in
    float64); float64 bounds are already correctly rounded and are left alone.
    """
    if x0.dtype == np.float64:
        return x0 - eps, x0 + eps
    exact = x0.astype(np.float64)
    lo = (exact - eps).astype(x0.dtype)
    hi = (exact + eps).astype(x0.dtype)
    for _ in range(2):  # rounding to x0's dtype is off by at most half an ulp
        lo = np.where(exact - lo.astype(np.float64) > eps, np.nextafter(lo, x0), lo)
        hi = np.where(hi.astype(np.float64) - exact > eps, np.nextafter(hi, x0), hi)
    return lo, hi


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray) -> tuple:
    """Per-sample losses, input gradient of their sum, and logits, with parameters frozen."""
    with model.frozen():
        xt = Tensor(x.astype(model.dtype, copy=False), requires_grad=True)
        with Tape():
            logits = model(xt)
            loss = softmax_cross_entropy(logits, y, reduction="sum")
        backward(loss, wrt_input=True)
    return loss.per_sample.astype(np.float64), xt.grad, logits.data


def losses_at(model: Model, x: np.ndarray, y: np.ndarray) -> tuple:
    logits = model.logits(x.astype(model.dtype, copy=False), batch=len(x) or 1)
    return per_sample_cross_entropy(logits.astype(np.float64), y), logits


def _check_ready(model: Model, spec: AttackSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"{kind.lower()} called with an AttackSpec of kind {spec.kind}")
    if model.training:
        raise RuntimeError("attacks need the model in eval mode")


def _random_start(x0: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> np.ndarray:
    if not spec.random_start or spec.epsilon == 0:
        return x0.copy()
    noise = rng.uniform(-spec.epsilon, spec.epsilon, size=x0.shape)
    return linf_project(x0 + noise.astype(x0.dtype), x0, spec.epsilon, spec.box)


def _finite(losses: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError(f"non-finite loss at attack step {step}")


def _sign_ascent(model: Model, x0: np.ndarray, y: np.ndarray, spec: AttackSpec,
                 snapshot: Optional[Callable]) -> AdvResult:
    x0 = np.asarray(x0, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(spec.seed)
    x = _random_start(x0, spec, rng)
    trace = []
    if spec.epsilon == 0:
        losses, logits = losses_at(model, x0, y)
        trace = [TraceStep(t, losses, snapshot(x0) if snapshot else None) for t in range(spec.steps + 1)]
        return AdvResult(x0.copy(), trace, logits.argmax(axis=1) != y, losses)
    alpha = np.asarray(spec.alpha, dtype=x0.dtype)
    for t in range(spec.steps):
        losses, grad, _ = loss_and_grad(model, x, y)
        _finite(losses, t)
        trace.append(TraceStep(t, losses, snapshot(x) if snapshot else None))
        x = linf_project(x + alpha * np.sign(grad), x0, spec.epsilon, spec.box)
    losses, logits = losses_at(model, x, y)
    _finite(losses, spec.steps)
    trace.append(TraceStep(spec.steps, losses, snapshot(x) if snapshot else None))
    return AdvResult(x, trace, logits.argmax(axis=1) != y, losses)


def pgd(model: Model, x0: np.ndarray, y, spec: AttackSpec, snapshot: Optional[Callable] = None) -> AdvResult:
    """Projected sign-gradient ascent; ``trace[t].loss`` is the loss at iterate t."""
    _check_ready(model, spec, "PGD")
    return _sign_ascent(model, x0, y, spec, snapshot)


def bim(model: Model, x0: np.ndarray, y, spec: AttackSpec, snapshot: Optional[Callable] = None) -> AdvResult:
    _check_ready(model, spec, "BIM")
    return _sign_ascent(model, x0, y, spec, snapshot)


def apgd_checkpoints(steps: int) -> list:
    """Iterations at which APGD may halve its step size."""
    p = [0.0, 0.22]
    while True:
        # rounding keeps e.g. 0.57 * 100 from landing on 57.000000000000007 and ceiling to 58
        nxt = round(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06), 10)
        if nxt > 1:
            break
        p.append(nxt)
    points = sorted({math.ceil(round(q * steps, 9)) for q in p[1:]})
    return [w for w in points if 0 < w <= steps]


def apgd(model: Model, x0: np.ndarray, y, spec: AttackSpec, snapshot: Optional[Callable] = None,
         rho: float = 0.75, momentum: float = 0.75) -> AdvResult:
    """Auto-PGD: momentum iterates, checkpointed step-size halving, best-loss tracking.

    Returns the best-loss iterate of every sample.
    """
    _check_ready(model, spec, "APGD")
    x0 = np.asarray(x0, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    n = len(x0)
    eps = spec.epsilon
    rng = np.random.default_rng(spec.seed)
    if eps == 0:
        losses, logits = losses_at(model, x0, y)
        trace = [TraceStep(t, losses, snapshot(x0) if snapshot else None) for t in range(spec.steps + 1)]
        hist = np.tile(losses, (spec.steps + 1, 1))
        return AdvResult(x0.copy(), trace, logits.argmax(axis=1) != y, losses, hist)

    bshape = (n,) + (1,) * (x0.ndim - 1)
    eta = np.full(n, spec.alpha, dtype=np.float64)
    checkpoints = set(apgd_checkpoints(spec.steps))

    x = _random_start(x0, spec, rng)
    loss, grad, _ = loss_and_grad(model, x, y)
    _finite(loss, 0)
    trace = [TraceStep(0, loss, snapshot(x) if snapshot else None)]
    best_x, best_loss = x.copy(), loss.copy()
    hist = [best_loss.copy()]

    x_prev = x.copy()
    improved = np.zeros(n, dtype=np.int64)
    last_cp = 0
    eta_at_cp = eta.copy()
    best_at_cp = best_loss.copy()
    prev_loss = loss.copy()

    for k in range(spec.steps):
        step = eta.reshape(bshape).astype(x.dtype)
        z = linf_project(x + step * np.sign(grad), x0, eps, spec.box)
        if k == 0:
            x_new = z
        else:
            x_new = linf_project(x + momentum * (z - x) + (1 - momentum) * (x - x_prev), x0, eps, spec.box)
        x_prev, x = x, x_new
        loss, grad, _ = loss_and_grad(model, x, y)
        _finite(loss, k + 1)
        trace.append(TraceStep(k + 1, loss, snapshot(x) if snapshot else None))
        improved += loss > prev_loss
        prev_loss = loss
        better = loss > best_loss
        best_x[better] = x[better]
        best_loss = np.where(better, loss, best_loss)
        hist.append(best_loss.copy())

        it = k + 1
        if it in checkpoints:
            interval = it - last_cp
            cond1 = improved < rho * interval
            cond2 = (eta_at_cp == eta) & (best_at_cp == best_loss)
            halve = cond1 | cond2
            eta_at_cp = eta.copy()
            best_at_cp = best_loss.copy()
            if halve.any():
                eta = np.where(halve, eta / 2, eta)
                x[halve] = best_x[halve]
                x_prev[halve] = best_x[halve]
                prev_loss = np.where(halve, best_loss, prev_loss)
                if it < spec.steps:
                    # the gradient must belong to the restarted iterate
                    _, g_best, _ = loss_and_grad(model, x[halve], y[halve])
                    grad = grad.copy()
                    grad[halve] = g_best
            improved[:] = 0
            last_cp = it

    _, logits = losses_at(model, best_x, y)
    return AdvResult(best_x, trace, logits.argmax(axis=1) != y, best_loss, np.stack(hist))


def run_attack(model: Model, x0: np.ndarray, y, spec: AttackSpec, snapshot: Optional[Callable] = None) -> AdvResult:
    fn = {"PGD": pgd, "BIM": bim, "APGD": apgd}[spec.kind]
    return fn(model, x0, y, spec, snapshot)
