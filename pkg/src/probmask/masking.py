"""Bernoulli masks reparameterized through Gumbel noise.

Each maskable weight ``w_i`` carries a keep-probability ``s_i``. A mask value is
drawn as ``1(logit(s_i) + g1_i - g0_i >= 0)`` with ``g1, g0 ~ Gumbel(0, 1)``,
which is exactly Bernoulli(s_i). During training the indicator is relaxed to
``sigmoid((logit(s_i) + g1_i - g0_i) / tau)`` so gradients reach ``s``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

EPS = 1e-6

# k + 0.5 is exact in float64 for k < 2**52, so U never rounds to 0 or 1
_U_BITS = 52


def counter_rng(seed: int, *counters: int) -> np.random.Generator:
    """Philox stream keyed by ``(seed, *counters)``.

    Streams for different counter tuples are independent of the order in which
    they are created, so draws do not depend on loop or thread ordering.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(c) for c in counters]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass
class ProbVector:
    """Keep-probabilities, one array per maskable tensor, shaped like that tensor."""

    segments: dict[str, np.ndarray]

    @classmethod
    def ones(cls, shapes: Mapping[str, tuple]) -> "ProbVector":
        return cls({k: np.ones(v) for k, v in shapes.items()})

    @property
    def layer_index(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, seg in self.segments.items():
            out[name] = slice(start, start + seg.size)
            start += seg.size
        return out

    @property
    def n(self) -> int:
        return int(sum(seg.size for seg in self.segments.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([seg.ravel() for seg in self.segments.values()])

    def with_flat(self, flat: np.ndarray) -> "ProbVector":
        if flat.shape != (self.n,):
            raise ValueError(f"expected flat vector of length {self.n}, got {flat.shape}")
        return ProbVector({name: flat[sl].reshape(self.segments[name].shape).copy()
                           for name, sl in self.layer_index.items()})

    def copy(self) -> "ProbVector":
        return ProbVector({k: v.copy() for k, v in self.segments.items()})


@dataclass
class GumbelDraw:
    g1: dict[str, np.ndarray]
    g0: dict[str, np.ndarray]


@dataclass
class MaskSample:
    values: dict[str, np.ndarray]
    kind: str  # "soft" | "hard"

    @property
    def n(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def remaining_ratio(self) -> float:
        return float(sum(v.sum() for v in self.values.values()) / self.n)


def sigmoid(x):
    # two-branch form keeps exp() from overflowing
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def uniform_open(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the open interval (0, 1): (k + 1/2) / 2**52."""
    k = rng.integers(0, 2 ** _U_BITS, size=shape, dtype=np.int64)
    return (k + 0.5) / 2.0 ** _U_BITS


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    return gumbel_from_uniform(uniform_open(shape, rng))


def sample_draw(s: ProbVector, rng: np.random.Generator) -> GumbelDraw:
    g1, g0 = {}, {}
    for name, seg in s.segments.items():
        g1[name] = sample_gumbel(seg.shape, rng)
        g0[name] = sample_gumbel(seg.shape, rng)
    return GumbelDraw(g1, g0)


def _logit_clamped(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sc = np.clip(s, EPS, 1.0 - EPS)
    return sc, np.log(sc) - np.log1p(-sc)


def _preactivation(s, g1, g0):
    sc, lg = _logit_clamped(s)
    return sc, lg + g1 - g0


def soft_mask(s: ProbVector, draw: GumbelDraw, tau: float) -> MaskSample:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    values = {}
    for name, seg in s.segments.items():
        _, a = _preactivation(seg, draw.g1[name], draw.g0[name])
        values[name] = sigmoid(a / tau)
    return MaskSample(values, "soft")


def hard_mask(s: ProbVector, draw: GumbelDraw) -> MaskSample:
    values = {}
    for name, seg in s.segments.items():
        _, a = _preactivation(seg, draw.g1[name], draw.g0[name])
        m = (a >= 0).astype(np.float64)
        m[seg <= EPS] = 0.0
        m[seg >= 1.0 - EPS] = 1.0
        values[name] = m
    return MaskSample(values, "hard")


def s_factor(s_i, g, tau):
    """d sigmoid((logit(s) + g)/tau) / ds, i.e. sigma(rx)(1 - sigma(rx)) x / (s(1-s)).

    ``r = logit(s) + g`` and ``x = 1/tau``; ``s`` is clamped to [EPS, 1-EPS].
    """
    sc, lg = _logit_clamped(np.asarray(s_i, dtype=np.float64))
    x = 1.0 / np.asarray(tau, dtype=np.float64)
    y = (lg + g) * x
    # sigma(y) * sigma(-y) keeps the tail where 1 - sigma(y) rounds to 0
    return sigmoid(y) * sigmoid(-y) * x / (sc * (1.0 - sc))


def chain_grad_to_prob(grad_mask: Mapping[str, np.ndarray], s: ProbVector, draw: GumbelDraw,
                       tau: float) -> dict[str, np.ndarray]:
    """Pull dL/dm back through the relaxed sampler to dL/ds for one draw."""
    out = {}
    for name, seg in s.segments.items():
        out[name] = grad_mask[name] * s_factor(seg, draw.g1[name] - draw.g0[name], tau)
    return out


def mean_grads(grads: Iterable[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Average a sequence of gradient dicts, summing in the given order."""
    total, count = None, 0
    for g in grads:
        if total is None:
            total = {k: v.copy() for k, v in g.items()}
        else:
            for k, v in g.items():
                total[k] += v
        count += 1
    if total is None:
        raise ValueError("no gradients to average")
    return {k: v / count for k, v in total.items()}
