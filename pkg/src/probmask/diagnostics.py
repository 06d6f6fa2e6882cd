"""Tables describing a probability vector or mask, written as CSV."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .masking import MaskSample, ProbVector, s_factor, sigmoid

BINARY_TOL = 0.05

HEADERS = {
    "histogram": ("bin_lo", "bin_hi", "count"),
    "layer_ratio": ("layer", "ratio"),
    "s_curve": ("tau", "S"),
}


@dataclass
class DiagRecord:
    kind: str
    rows: list[tuple]
    scalars: dict[str, float] = field(default_factory=dict)

    @property
    def header(self) -> tuple[str, ...]:
        return HEADERS[self.kind]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header)
            for row in self.rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _values(obj) -> Mapping[str, np.ndarray]:
    if isinstance(obj, ProbVector):
        return obj.segments
    if isinstance(obj, MaskSample):
        return obj.values
    return obj


def frac_binary(flat: np.ndarray, tol: float = BINARY_TOL) -> float:
    return float(np.mean((flat <= tol) | (flat >= 1.0 - tol)))


def prob_histogram(s, bins: int = 20) -> DiagRecord:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    flat = np.concatenate([v.ravel() for v in _values(s).values()])
    # np.histogram puts the right edge 1.0 into the last bin
    counts, edges = np.histogram(flat, bins=bins, range=(0.0, 1.0))
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return DiagRecord("histogram", rows, {"frac_binary": frac_binary(flat)})


def layer_remaining(mask_or_s) -> DiagRecord:
    """Mean value per layer: expected keep ratio for probabilities, exact for hard masks."""
    rows = [(name, float(v.sum() / v.size)) for name, v in _values(mask_or_s).items()]
    return DiagRecord("layer_ratio", rows)


def stationary_root(tol: float = 1e-12) -> float:
    """Positive root of y - 2 y sigmoid(y) + 1 = 0, by bisection on [0, 10]."""
    f = lambda y: y - 2.0 * y * float(sigmoid(y)) + 1.0
    lo, hi = 0.0, 10.0  # f(0) = 1 > 0, f(10) < 0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def s_factor_curve(s_i: float, g: float, tau_grid: Sequence[float]) -> DiagRecord:
    if not 0 < s_i < 1:
        raise ValueError("s_i must lie strictly inside (0, 1)")
    taus = np.asarray(tau_grid, dtype=np.float64)
    if np.any(taus <= 0):
        raise ValueError("temperatures must be positive")
    S = s_factor(s_i, g, taus)
    r = float(np.log(s_i) - np.log1p(-s_i) + g)
    root = stationary_root()
    return DiagRecord("s_curve", [(float(t), float(v)) for t, v in zip(taus, S)],
                      {"r": r, "root": root, "peak_tau": abs(r) / root if r else float("inf")})
