"""Euclidean projection onto C = {s : sum(s) <= K, 0 <= s_i <= 1}.

The projection is ``clip(z - v, 0, 1)`` where ``v = max(0, v1)`` and ``v1`` is a
root of the non-increasing piecewise-linear function

    residual(v) = sum_i min(1, max(0, z_i - v)) - K,

found by bisection.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

DEFAULT_TOL = 1e-10
MAX_ITER = 200


@dataclass
class ProjectionResult:
    s: np.ndarray
    v_star: float
    iterations: int
    residual: float


def residual(v: float, z: np.ndarray, K: float) -> float:
    return float(np.clip(z - v, 0.0, 1.0).sum() - K)


def project_global(z, K: float, tol: float = DEFAULT_TOL) -> ProjectionResult:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("projection input contains NaN or Inf")
    if not K > 0:
        raise ValueError(f"budget must be positive, got {K}")
    clipped = np.clip(z, 0.0, 1.0)
    r0 = float(clipped.sum() - K)
    if r0 <= 0:
        # sum constraint inactive: v1 <= 0 so v2 = 0
        return ProjectionResult(clipped, 0.0, 0, abs(r0))

    # residual(lo) = n - K > 0 and residual(hi) = -K < 0. Keep the invariant
    # residual(lo) > 0 >= residual(hi) and return hi, so the output never
    # overshoots the budget by more than summation rounding.
    lo, hi = float(z.min()) - 1.0, float(z.max())
    r_hi = -K
    it = 0
    while hi - lo > tol and it < MAX_ITER:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        r = residual(mid, z, K)
        it += 1
        if r > 0:
            lo = mid
        else:
            hi, r_hi = mid, r
            if r == 0:
                break
    v = max(0.0, hi)
    return ProjectionResult(np.clip(z - v, 0.0, 1.0), v, it, abs(r_hi))


def project_layerwise(z_layers: Sequence[np.ndarray], k: float,
                      tol: float = DEFAULT_TOL) -> list[ProjectionResult]:
    """Project every layer separately onto its own budget ``k * n_layer``."""
    if not 0 < k <= 1:
        raise ValueError(f"remaining ratio must lie in (0, 1], got {k}")
    out = []
    for z in z_layers:
        z = np.asarray(z, dtype=np.float64).ravel()
        if z.size == 0:
            raise ValueError("empty layer")
        out.append(project_global(z, k * z.size, tol))
    return out


# --- brute-force oracle (tests only) -----------------------------------------

ORACLE_MAX_N = 12


@lru_cache(maxsize=None)
def _patterns(n: int) -> np.ndarray:
    # 0 = clipped to 0, 1 = clipped to 1, 2 = free
    return np.array(list(itertools.product((0, 1, 2), repeat=n)), dtype=np.int8).reshape(-1, n)


def oracle_project(z, K: float, tol: float = 1e-9) -> np.ndarray:
    """Projection by enumerating every active set.

    For each assignment of coordinates to {at 0, at 1, free} and each state of
    the sum constraint (slack or tight) the equality-constrained least-squares
    problem is solved in closed form; candidates that satisfy the KKT conditions
    are kept and the closest one to ``z`` is returned. Exponential in ``n``.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    if n > ORACLE_MAX_N:
        raise ValueError(f"oracle refuses n={n} > {ORACLE_MAX_N}")
    pat = _patterns(n)
    zero, one, free = pat == 0, pat == 1, pat == 2
    n_one = one.sum(axis=1)
    n_free = free.sum(axis=1)
    zf_sum = np.where(free, z, 0.0).sum(axis=1)

    best, best_d = None, np.inf
    for tight in (False, True):
        if tight:
            with np.errstate(divide="ignore", invalid="ignore"):
                v = (zf_sum + n_one - K) / n_free
            # no free coordinates: feasible only if the ones exactly meet K
            v = np.where(n_free == 0, np.where(np.abs(n_one - K) <= tol, 0.0, np.nan), v)
        else:
            v = np.zeros(len(pat))
        s = np.where(zero, 0.0, np.where(one, 1.0, z[None, :] - v[:, None]))
        shifted = z[None, :] - v[:, None]
        ok = np.isfinite(v) & (v >= -tol)
        ok &= np.all(~free | ((s >= -tol) & (s <= 1 + tol)), axis=1)
        ok &= s.sum(axis=1) <= K + tol
        # multipliers of the box bounds must be non-negative
        ok &= np.all(~zero | (shifted <= tol), axis=1)
        ok &= np.all(~one | (shifted >= 1 - tol), axis=1)
        if not ok.any():
            continue
        d = ((s - z) ** 2).sum(axis=1)
        d = np.where(ok, d, np.inf)
        i = int(np.argmin(d))
        if d[i] < best_d:
            best, best_d = s[i], d[i]
    if best is None:
        raise RuntimeError("no KKT point found")
    return best
