"""Momentum SGD for weights and projected Adam for keep-probabilities."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masking import ProbVector
from .projection import project_global, project_layerwise


@dataclass
class OptimState:
    sgd: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0


def sgd_step(w: np.ndarray, grad: np.ndarray, lr: float, momentum: float, state: OptimState,
             key: str = "", weight_decay: float = 0.0) -> np.ndarray:
    """buf <- momentum * buf + grad;  w <- w - lr * buf  (returns the new ``w``)."""
    if w.shape != grad.shape:
        raise ValueError(f"{key}: weight {w.shape} and gradient {grad.shape} differ")
    if lr < 0 or not 0 <= momentum < 1:
        raise ValueError(f"bad SGD hyperparameters lr={lr} momentum={momentum}")
    if weight_decay:
        grad = grad + weight_decay * w
    buf = state.sgd.get(key)
    if buf is None:
        buf = np.zeros_like(w)
    elif buf.shape != w.shape:
        raise ValueError(f"{key}: momentum buffer {buf.shape} does not match {w.shape}")
    buf = momentum * buf + grad
    state.sgd[key] = buf
    return w - lr * buf


def adam_step(s: np.ndarray, s_grad: np.ndarray, lr: float, state: OptimState,
              betas=(0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam step on the flat vector ``s``; returns the pre-projection point.

    No weight decay. The step counter lives in ``state``.
    """
    b1, b2 = betas
    if not state.adam_m:
        state.adam_m["s"] = np.zeros_like(s)
        state.adam_v["s"] = np.zeros_like(s)
    m, v = state.adam_m["s"], state.adam_v["s"]
    if m.shape != s.shape:
        raise ValueError("Adam buffers do not match the probability vector")
    state.adam_t += 1
    m *= b1
    m += (1 - b1) * s_grad
    v *= b2
    v += (1 - b2) * s_grad * s_grad
    m_hat = m / (1 - b1 ** state.adam_t)
    v_hat = v / (1 - b2 ** state.adam_t)
    return s - lr * m_hat / (np.sqrt(v_hat) + eps)


def prob_update(s: ProbVector, grad_s: dict[str, np.ndarray], lr: float, state: OptimState,
                K: float, mode: str = "global") -> ProbVector:
    """Adam step followed by projection onto the feasible set.

    ``mode="global"``: one budget ``K`` over every layer.
    ``mode="layerwise"``: each layer gets ``(K / n) * n_layer``.
    Adam moments are left untouched by the projection.
    """
    flat = s.flat()
    g = np.concatenate([grad_s[name].ravel() for name in s.segments])
    z = adam_step(flat, g, lr, state)
    if mode == "global":
        return s.with_flat(project_global(z, K).s)
    if mode == "layerwise":
        k = min(1.0, K / s.n)
        idx = s.layer_index
        results = project_layerwise([z[idx[name]] for name in s.segments], k)
        return s.with_flat(np.concatenate([r.s for r in results]))
    raise ValueError(f"unknown constraint mode {mode!r}")
