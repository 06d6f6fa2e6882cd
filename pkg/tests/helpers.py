import numpy as np


def central_diff(f, x: np.ndarray, idx, eps: float) -> float:
    """Central finite difference of scalar ``f`` w.r.t. ``x[idx]`` (x is perturbed in place)."""
    old = x[idx]
    x[idx] = old + eps
    up = f()
    x[idx] = old - eps
    down = f()
    x[idx] = old
    return (up - down) / (2 * eps)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
