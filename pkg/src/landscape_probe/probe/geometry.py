"""Where on the expanded grid do gradients and perturbations live?"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

NORMS = ("l1", "l2sq", "linf_count")


@dataclass(frozen=True)
class MassSplit:
    mass_aux: float
    mass_sig: float
    fraction_aux: Optional[float]  # None when the tensor carries no mass at all

    @property
    def empty(self) -> bool:
        return self.fraction_aux is None

    @property
    def total(self) -> float:
        return self.mass_aux + self.mass_sig


def mass_decomposition(t: np.ndarray, mask: np.ndarray, norm: str = "l1") -> MassSplit:
    """Split a tensor's magnitude between auxiliary (mask False) and signal (mask True) coordinates.

    ``t`` may carry any leading dimensions; its last two must match ``mask``.
    ``linf_count`` counts coordinates whose magnitude is within one ulp of the maximum.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-2:] != mask.shape:
        raise ValueError(f"tensor spatial shape {t.shape[-2:]} does not match mask {mask.shape}")
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")
    mag = np.abs(t)
    if norm == "l2sq":
        mag = mag * mag
    elif norm == "linf_count":
        top = mag.max() if mag.size else 0.0
        if top == 0:
            return MassSplit(0.0, 0.0, None)
        mag = (mag >= top - np.spacing(top)).astype(np.float64)
    sig = float(mag[..., mask].sum())
    aux = float(mag[..., ~mask].sum())
    total = aux + sig
    return MassSplit(aux, sig, aux / total if total > 0 else None)


def mean_abs_ratio(grad: np.ndarray, mask: np.ndarray) -> float:
    """Mean |grad| over auxiliary coordinates divided by mean |grad| over signal coordinates."""
    g = np.abs(np.asarray(grad, dtype=np.float64))
    sig = g[..., mask].mean()
    aux = g[..., ~mask].mean()
    return float(aux / sig) if sig > 0 else math.inf


@dataclass(frozen=True)
class AlignmentPhase:
    factor: int
    stride: int
    kernel: int
    phase_counts: tuple  # visits per lattice phase over one period of the stem grid
    distinct: int
    aligned: bool  # fewer distinct phases than the lattice period
    integer_multiple: bool  # factor is a multiple of the stride
    window_coverage: int  # lattice phases touched by a single receptive field


def alignment_phase(factor: int, stride: int, kernel: int = 7, padding: Optional[int] = None) -> AlignmentPhase:
    """Phases of the auxiliary lattice visited by the stem's sampling grid.

    Output position o starts its window at o*stride - padding; its phase is
    that start modulo ``factor``. Over one period the grid visits
    factor / gcd(factor, stride) distinct phases.
    """
    if factor < 1 or stride < 1:
        raise ValueError("factor and stride must be >= 1")
    pad = kernel // 2 if padding is None else padding
    period = factor // math.gcd(factor, stride)
    counts = Counter((o * stride - pad) % factor for o in range(period))
    phases = tuple(counts.get(p, 0) for p in range(factor))
    distinct = sum(1 for c in phases if c)
    coverage = len({(-pad + k) % factor for k in range(kernel)})
    return AlignmentPhase(factor, stride, kernel, phases, distinct, distinct < factor,
                          factor % stride == 0, coverage)
