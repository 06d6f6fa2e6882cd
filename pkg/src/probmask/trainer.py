"""The training loop: joint weight / keep-probability optimization under a sparsity budget.

Per epoch ``t = 1..T`` the temperature and remaining ratio are refreshed. Each
iteration draws ``I`` Gumbel pairs, evaluates the network once per draw with the
relaxed mask, averages the gradients, takes a projected Adam step on the
probabilities and then (in prune mode) a momentum-SGD step on the weights. Both
gradients come from the same forward/backward pass.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import netcore
from .data import Dataset, batches
from .diagnostics import frac_binary
from .masking import (MaskSample, ProbVector, chain_grad_to_prob, counter_rng, hard_mask,
                      mean_grads, sample_draw, soft_mask)
from .netcore import NetSpec, NetState
from .optim import OptimState, prob_update, sgd_step
from .schedules import ScheduleParams, budget, remaining_ratio, temperature, weight_lr

log = logging.getLogger(__name__)

# independent RNG streams derived from the run seed
_STREAM_BATCH = 1
_STREAM_GUMBEL = 2
_STREAM_FINAL = 3

REPORT_HEADER = ("epoch", "loss", "acc", "mean_s", "frac_binary", "tau", "k")


class DivergenceError(RuntimeError):
    def __init__(self, message, epoch, iteration, state, s):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration
        self.state = state
        self.s = s

    def dump(self, path) -> None:
        arrays = {f"w/{k}": v for k, v in self.state.weights.items()}
        arrays.update({f"s/{k}": v for k, v in self.s.segments.items()})
        np.savez(path, epoch=self.epoch, iteration=self.iteration, **arrays)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "prune"  # prune | supermask
    constraint: str = "global"  # global | layerwise
    k_f: float = 0.1
    t1: int = 48
    t2: int = 180
    T: int = 300
    batch_size: int = 256
    I: int = 1
    seed: int = 0
    lr_w: float = 0.1
    lr_s: float = 6e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup: bool = False
    finalize: str = "sample"  # sample | round
    eval_every: int = 1

    def __post_init__(self):
        if self.mode not in ("prune", "supermask"):
            raise ValueError(f"mode must be 'prune' or 'supermask', got {self.mode!r}")
        if self.constraint not in ("global", "layerwise"):
            raise ValueError(f"constraint must be 'global' or 'layerwise', got {self.constraint!r}")
        if self.finalize not in ("sample", "round"):
            raise ValueError(f"finalize must be 'sample' or 'round', got {self.finalize!r}")
        if self.I < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("I, batch_size and eval_every must be >= 1")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.T > 0:
            ScheduleParams(self.T, self.t1, self.t2, self.k_f)  # raises on a bad ramp

    @property
    def schedule(self) -> ScheduleParams:
        return ScheduleParams(self.T, self.t1, self.t2, self.k_f)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float
    mean_s: float
    frac_binary: float
    tau: float
    k: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    final_mask: MaskSample | None = None
    achieved_ratio: float = 1.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for r in self.records:
                writer.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in REPORT_HEADER[1:]])

    def as_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def finalize_mask(s: ProbVector, mode: str, rng: np.random.Generator | None = None) -> MaskSample:
    """Hard mask from ``s``: a Bernoulli sample (``sample``) or ``1(s >= 0.5)`` (``round``)."""
    if mode == "round":
        return MaskSample({k: (v >= 0.5).astype(np.float64) for k, v in s.segments.items()}, "hard")
    if mode == "sample":
        if rng is None:
            raise ValueError("sample finalization needs an rng")
        return hard_mask(s, sample_draw(s, rng))
    raise ValueError(f"unknown finalization mode {mode!r}")


def evaluate(spec: NetSpec, state: NetState, mask: MaskSample | None, dataset: Dataset) -> float:
    """Top-1 accuracy of the network with weights ``w * m``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if mask is not None and mask.kind != "hard":
        raise ValueError("evaluation needs a hard mask")
    values = None if mask is None else mask.values
    pred = netcore.predict(spec, state, values, dataset.inputs)
    return float(np.mean(pred == dataset.labels))


def _threads(I: int) -> int:
    try:
        cap = int(os.environ.get("PROBMASK_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, I))


def train(spec: NetSpec, config: TrainConfig, dataset: Dataset, eval_data: Dataset | None = None,
          init_state: NetState | None = None,
          on_iteration: Callable[[int, int, ProbVector, float], None] | None = None):
    """Run the full loop; returns ``(state, s, report)``.

    ``eval_data`` defaults to the training set. ``on_iteration(epoch, it, s, K)``
    is called after every probability update (used by tests to audit feasibility).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    eval_data = dataset if eval_data is None else eval_data
    state = init_state.copy() if init_state is not None else netcore.kaiming_normal_init(spec, config.seed)
    s = ProbVector.ones(spec.mask_shapes())
    n = s.n
    opt = OptimState()
    report = TrainReport()
    frozen = config.mode == "supermask"
    pool = ThreadPoolExecutor(_threads(config.I)) if _threads(config.I) > 1 else None

    def one_sample(args):
        draw, tau, xb, yb = args
        m = soft_mask(s, draw, tau)
        loss, g_w, g_m = netcore.loss_and_grads(spec, state, m.values, xb, yb)
        return loss, g_w, chain_grad_to_prob(g_m, s, draw, tau)

    final_mask = finalize_mask(s, config.finalize, counter_rng(config.seed, _STREAM_FINAL, 0))
    try:
        for epoch in range(1, config.T + 1):
            sched = config.schedule
            tau = temperature(epoch, sched)
            k = remaining_ratio(epoch, sched)
            K = budget(k, n)
            lr_w = weight_lr(epoch, config.lr_w, config.T, config.warmup)
            losses = []
            for it, idx in enumerate(batches(dataset, config.batch_size, (config.seed, _STREAM_BATCH, epoch))):
                xb, yb = dataset.inputs[idx], dataset.labels[idx]
                draws = [sample_draw(s, counter_rng(config.seed, _STREAM_GUMBEL, epoch, it, i))
                         for i in range(config.I)]
                jobs = [(d, tau, xb, yb) for d in draws]
                results = list(pool.map(one_sample, jobs)) if pool else [one_sample(j) for j in jobs]
                loss = sum(r[0] for r in results) / len(results)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, iteration {it}",
                                          epoch, it, state, s)
                grad_s = mean_grads(r[2] for r in results)
                grad_w = mean_grads(r[1] for r in results)
                # ReLU maps NaN activations to 0, so a finite loss can still carry NaN gradients
                if not all(np.all(np.isfinite(g)) for g in (*grad_s.values(), *grad_w.values())):
                    raise DivergenceError(f"non-finite gradient at epoch {epoch}, iteration {it}",
                                          epoch, it, state, s)
                losses.append(loss)
                s = prob_update(s, grad_s, config.lr_s, opt, K, config.constraint)
                if on_iteration is not None:
                    on_iteration(epoch, it, s, K)
                if not frozen:
                    state.zero_grad()
                    for name, g in grad_w.items():
                        state.grads[name] += g
                        state.weights[name] = sgd_step(state.weights[name], state.grads[name], lr_w,
                                                       config.momentum, opt, name, config.weight_decay)
            flat = s.flat()
            acc = float("nan")
            if epoch % config.eval_every == 0 or epoch == config.T:
                final_mask = finalize_mask(s, config.finalize,
                                           counter_rng(config.seed, _STREAM_FINAL, epoch))
                acc = evaluate(spec, state, final_mask, eval_data)
            rec = EpochRecord(epoch, float(np.mean(losses)), acc, float(flat.sum() / n),
                              frac_binary(flat), tau, k)
            report.records.append(rec)
            log.info("epoch %d loss %.4f acc %.4f mean_s %.4f frac_binary %.3f tau %.3f k %.4f",
                     rec.epoch, rec.loss, rec.acc, rec.mean_s, rec.frac_binary, rec.tau, rec.k)
    finally:
        if pool is not None:
            pool.shutdown()
    report.final_mask = final_mask
    report.achieved_ratio = final_mask.remaining_ratio()
    return state, s, report


def train_supermask(spec: NetSpec, config: TrainConfig, dataset: Dataset,
                    eval_data: Dataset | None = None, init_state: NetState | None = None):
    """Mask search over frozen Kaiming-normal weights; returns ``(s, report)``."""
    if config.mode != "supermask":
        raise ValueError("train_supermask needs config.mode == 'supermask'")
    _, s, report = train(spec, config, dataset, eval_data, init_state)
    return s, report
