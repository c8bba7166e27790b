"""Symmetry-breaking dimensional expansion and the auxiliary-reset projection.

An image of shape (C, H, W) is embedded into a (C, H*F, W*F) grid. Signal
pixel (i, j) lands on (i*F, j*F), the top-left corner of its F x F block;
every other coordinate is auxiliary and carries a fill value.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class FillScheme:
    """How auxiliary coordinates are filled.

    ``constant`` uses ``value`` everywhere; ``gapcycle`` cycles
    ``-value, 0, +value`` along the raster order of the auxiliary coordinates.
    """

    kind: str = "constant"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "gapcycle"):
            raise ValueError(f"unknown fill kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError(f"fill value must be finite, got {self.value}")
        if self.kind == "gapcycle" and not self.value > 0:
            raise ValueError(f"gapcycle amplitude must be > 0, got {self.value}")

    @classmethod
    def constant(cls, c: float) -> "FillScheme":
        return cls("constant", float(c))

    @classmethod
    def gapcycle(cls, a: float) -> "FillScheme":
        return cls("gapcycle", float(a))

    @classmethod
    def parse(cls, text: str) -> "FillScheme":
        """Parse ``"0.0"``, ``"const:0.5"`` or ``"gapcycle:0.2"`` / ``"0.2-GapCycle"``."""
        t = str(text).strip()
        low = t.lower()
        if low.endswith("-gapcycle"):
            return cls.gapcycle(float(t[: -len("-gapcycle")]))
        if ":" in t:
            kind, val = t.split(":", 1)
            kind = kind.strip().lower()
            if kind in ("const", "constant"):
                return cls.constant(float(val))
            if kind == "gapcycle":
                return cls.gapcycle(float(val))
            raise ValueError(f"unknown fill kind in {text!r}")
        return cls.constant(float(t))

    @property
    def label(self) -> str:
        if self.kind == "gapcycle":
            return f"{self.value!r}-GapCycle"
        return repr(self.value)

    def lowest(self) -> float:
        return -self.value if self.kind == "gapcycle" else self.value

    def highest(self) -> float:
        return self.value


@dataclass(frozen=True)
class ExpansionSpec:
    factor: int
    fill: FillScheme = FillScheme()
    channels: int = 3
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if int(self.factor) != self.factor or self.factor < 1:
            raise ValueError(f"expansion factor must be an integer >= 1, got {self.factor}")
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def source_shape(self) -> tuple:
        return (self.channels, self.height, self.width)

    @property
    def expanded_shape(self) -> tuple:
        return (self.channels, self.height * self.factor, self.width * self.factor)

    @cached_property
    def mask(self) -> np.ndarray:
        return partition(self)

    @cached_property
    def fill_grid(self) -> np.ndarray:
        """(H*F, W*F) array of fill values on auxiliary coordinates, 0 on signal ones."""
        m = self.mask
        grid = np.zeros(m.shape, dtype=np.float64)
        aux = ~m
        if self.fill.kind == "constant":
            grid[aux] = self.fill.value
        else:
            a = self.fill.value
            cycle = np.array([-a, 0.0, a])
            grid[aux] = cycle[np.arange(int(aux.sum())) % 3]
        return grid

    def default_box(self) -> tuple:
        """Valid coordinate range for attacks: [0, 1] widened to include every fill value."""
        if self.factor == 1:
            return (0.0, 1.0)
        return (min(0.0, self.fill.lowest()), max(1.0, self.fill.highest()))


def partition(spec: ExpansionSpec) -> np.ndarray:
    """Boolean (H*F, W*F) mask, True on signal coordinates."""
    f = spec.factor
    mask = np.zeros((spec.height * f, spec.width * f), dtype=bool)
    mask[::f, ::f] = True
    return mask


def fill_value_at(spec: ExpansionSpec, channel: int, i: int, j: int, aux_index: Optional[int] = None) -> float:
    """Fill value of auxiliary coordinate (i, j); identical for every channel.

    ``aux_index`` is the raster ordinal of (i, j) among auxiliary coordinates;
    it is derived from (i, j) when omitted and must agree when given.
    """
    if not 0 <= channel < spec.channels:
        raise IndexError(f"channel {channel} out of range")
    f = spec.factor
    if i % f == 0 and j % f == 0:
        raise ValueError(f"({i}, {j}) is a signal coordinate")
    # aux coordinates before (i, j): all earlier rows minus their signal pixels, then this row
    row_w = spec.width * f
    signal_rows_before = (i + f - 1) // f
    derived = i * row_w - signal_rows_before * spec.width
    if i % f == 0:
        derived += j - (j + f - 1) // f
    else:
        derived += j
    if aux_index is not None and aux_index != derived:
        raise ValueError(f"aux_index {aux_index} does not match raster ordinal {derived} of ({i}, {j})")
    if spec.fill.kind == "constant":
        return spec.fill.value
    a = spec.fill.value
    return (-a, 0.0, a)[derived % 3]


def _check(x: np.ndarray, expected: tuple, what: str) -> None:
    if tuple(x.shape[-3:]) != tuple(expected) or x.ndim not in (3, 4):
        raise ValueError(f"{what}: expected shape (N?, {', '.join(map(str, expected))}), got {x.shape}")


def expand(image: np.ndarray, spec: ExpansionSpec) -> np.ndarray:
    """Embed (C, H, W) or (N, C, H, W) images into the expanded grid."""
    image = np.asarray(image)
    _check(image, spec.source_shape, "expand")
    if spec.factor == 1:
        return image.copy()
    f = spec.factor
    out = np.empty(image.shape[:-2] + (spec.height * f, spec.width * f), dtype=image.dtype)
    out[...] = spec.fill_grid.astype(image.dtype)
    out[..., ::f, ::f] = image
    return out


def project(x: np.ndarray, spec: ExpansionSpec) -> np.ndarray:
    """Reset auxiliary coordinates to their fill values, keep signal coordinates."""
    x = np.asarray(x)
    _check(x, spec.expanded_shape, "project")
    f = spec.factor
    out = np.empty_like(x)
    out[...] = spec.fill_grid.astype(x.dtype)
    out[..., ::f, ::f] = x[..., ::f, ::f]
    return out


def extract(x: np.ndarray, spec: ExpansionSpec) -> np.ndarray:
    """Signal pixels of an expanded tensor as a compact (C, H, W) image."""
    x = np.asarray(x)
    _check(x, spec.expanded_shape, "extract")
    f = spec.factor
    return np.ascontiguousarray(x[..., ::f, ::f])


def aux_matches_fill(x: np.ndarray, spec: ExpansionSpec) -> bool:
    """True when every auxiliary coordinate of ``x`` equals its fill value exactly."""
    aux = ~spec.mask
    return bool(np.array_equal(x[..., aux], np.broadcast_to(spec.fill_grid[aux].astype(x.dtype), x[..., aux].shape)))
