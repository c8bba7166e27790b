"""Attack trajectories in the (signal pixel, neighbouring auxiliary pixel, loss) space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ..attacks import AttackSpec, losses_at, run_attack
from ..model.net import Model
from ..sbde import ExpansionSpec, project
from .geometry import mass_decomposition


@dataclass(frozen=True)
class TrajectoryRecord:
    step: int
    loss: float
    x_sig: float
    y_aux: float
    mass_aux: float
    mass_sig: float


@dataclass(frozen=True)
class RecoveryReport:
    loss_clean: float
    loss_adv: float
    loss_projected: float
    pred_clean: int
    pred_adv: int
    pred_projected: int

    @property
    def recovered(self) -> bool:
        return self.pred_projected == self.pred_clean

    @property
    def loss_drop(self) -> float:
        return self.loss_adv - self.loss_projected

    @property
    def attack_gain(self) -> float:
        return self.loss_adv - self.loss_clean


@dataclass
class TraceResult:
    pixel: tuple  # (channel, i, j) of the tracked signal coordinate; aux neighbour is (i, j + 1)
    records: list  # per sample: list of TrajectoryRecord, last one is the projected point
    reports: list  # per sample: RecoveryReport


def pick_signal_pixel(spec: ExpansionSpec, rng: np.random.Generator, channel: int = 0) -> tuple:
    f = spec.factor
    i = int(rng.integers(0, spec.height)) * f
    j = int(rng.integers(0, spec.width)) * f
    return (channel, i, j)


def trace_attack(model: Model, x0: np.ndarray, y, attack: AttackSpec, spec: ExpansionSpec,
                 tracked_pixel: Union[tuple, str, None] = "random", channel: int = 0,
                 seed: int = 0) -> TraceResult:
    """Run ``attack`` on expanded inputs ``x0`` and record every iterate plus the projected endpoint.

    The terminal record of each sample has step ``attack.steps + 1`` and is
    evaluated at project(adversarial).
    """
    if spec.factor < 2:
        raise ValueError("tracing needs an expansion factor >= 2: with F == 1 no auxiliary neighbour exists")
    x0 = np.asarray(x0, dtype=model.dtype)
    if x0.ndim == 3:
        x0 = x0[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    mask = spec.mask
    if tracked_pixel is None or tracked_pixel == "random":
        c, i, j = pick_signal_pixel(spec, np.random.default_rng(seed), channel)
    else:
        if len(tracked_pixel) == 2:
            c, (i, j) = channel, tracked_pixel
        else:
            c, i, j = tracked_pixel
        if not mask[i, j]:
            raise ValueError(f"tracked pixel ({i}, {j}) is not a signal coordinate")
    ja = j + 1

    def snapshot(x):
        delta = x - x0
        rows = []
        for s in range(len(x)):
            split = mass_decomposition(delta[s], mask, "l1")
            rows.append((float(x[s, c, i, j]), float(x[s, c, i, ja]), split.mass_aux, split.mass_sig))
        return rows

    result = run_attack(model, x0, y, attack, snapshot)
    loss_clean, logits_clean = losses_at(model, x0, y)
    loss_adv, logits_adv = losses_at(model, result.adversarial, y)
    x_proj = project(result.adversarial, spec)
    loss_proj, logits_proj = losses_at(model, x_proj, y)
    end = snapshot(x_proj)

    records, reports = [], []
    for s in range(len(x0)):
        rows = [TrajectoryRecord(t.step, float(t.loss[s]), *t.summary[s]) for t in result.trace]
        rows.append(TrajectoryRecord(attack.steps + 1, float(loss_proj[s]), *end[s]))
        records.append(rows)
        reports.append(RecoveryReport(float(loss_clean[s]), float(loss_adv[s]), float(loss_proj[s]),
                                      int(logits_clean[s].argmax()), int(logits_adv[s].argmax()),
                                      int(logits_proj[s].argmax())))
    return TraceResult((c, i, j), records, reports)


def recovery_margin(reports: list, fraction: float) -> float:
    """Median over samples of drop - fraction * gain; >= 0 means the median sample recovers that share."""
    if not reports:
        raise ValueError("no recovery reports")
    return float(np.median([r.loss_drop - fraction * r.attack_gain for r in reports]))


def median_recovery_ratio(reports: list) -> Optional[float]:
    """Median of drop / gain over samples whose loss the attack actually raised."""
    ratios = [r.loss_drop / r.attack_gain for r in reports if r.attack_gain > 0]
    return float(np.median(ratios)) if ratios else None
