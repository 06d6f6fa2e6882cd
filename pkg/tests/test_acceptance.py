"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to ``conftest.ACCEPTANCE_LINES``; the lines are
printed in the terminal summary. MNIST criteria use ``configs/reference.yaml``.
"""
import csv
import dataclasses
import time

import numpy as np
import pytest

from probmask import netcore
from probmask.cli import main
from probmask.config import load_config
from probmask.diagnostics import s_factor_curve, stationary_root
from probmask.fileio import read_mask
from probmask.masking import (ProbVector, chain_grad_to_prob, counter_rng, hard_mask, s_factor,
                              sample_draw, soft_mask)
from probmask.projection import oracle_project, project_global
from probmask.schedules import ScheduleParams, remaining_ratio, temperature
from probmask.trainer import train

from tests.conftest import ACCEPTANCE_LINES, MNIST_DIR, ROOT
from tests.helpers import central_diff, rel_err

REFERENCE = ROOT / "configs" / "reference.yaml"


def record(num: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}: {detail}")
    assert ok, detail


def reference_config():
    return load_config(REFERENCE).with_overrides(dataset=f"mnist:{MNIST_DIR}")


def run_reference(cfg):
    train_data, eval_data = cfg.load_data()
    spec = cfg.build_spec(train_data)
    return spec, train(spec, cfg.train, train_data, eval_data)


def test_1_projection_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        z = rng.uniform(-2, 3, n)
        K = rng.uniform(0.5, n)
        worst = max(worst, float(np.max(np.abs(project_global(z, K).s - oracle_project(z, K)))))
    elapsed = time.perf_counter() - start
    record(1, "projection matches active-set oracle", worst <= 1e-6 and elapsed < 10,
           f"max |diff| = {worst:.2e} over 1000 cases in {elapsed:.1f}s")


def test_2_projection_invariants():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst_feas = worst_idem = worst_expand = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        K = rng.uniform(0.1, 1.2 * n)
        z1, z2 = rng.uniform(-3, 4, n), rng.uniform(-3, 4, n)
        p1, p2 = project_global(z1, K).s, project_global(z2, K).s
        worst_feas = max(worst_feas, -p1.min(), p1.max() - 1, p1.sum() - K)
        worst_idem = max(worst_idem, float(np.max(np.abs(project_global(p1, K).s - p1))))
        worst_expand = max(worst_expand,
                           np.linalg.norm(p1 - p2) - np.linalg.norm(z1 - z2))
    elapsed = time.perf_counter() - start
    ok = worst_feas <= 1e-8 and worst_idem <= 1e-10 and worst_expand <= 1e-12 and elapsed < 10
    record(2, "projection feasibility / idempotence / non-expansiveness", ok,
           f"violation {worst_feas:.1e}, idempotence {worst_idem:.1e}, "
           f"expansion {worst_expand:.1e} on 10^4 cases in {elapsed:.1f}s")


def test_3_gumbel_sampling_identity():
    N = 100_000
    start = time.perf_counter()
    gaps = []
    ok = True
    for i, p in enumerate((0.1, 0.3, 0.5, 0.7, 0.9)):
        s = ProbVector({"a": np.full(N, p)})
        freq = hard_mask(s, sample_draw(s, counter_rng(31, i))).values["a"].mean()
        bound = 3 * np.sqrt(p * (1 - p) / N)
        gaps.append(abs(freq - p) / bound)
        ok &= abs(freq - p) <= bound
    elapsed = time.perf_counter() - start
    record(3, "P(hard mask = 1) = s", bool(ok) and elapsed < 5,
           f"worst gap {max(gaps):.2f} of the 3-sigma bound, {elapsed:.1f}s")


def test_4_gradients():
    start = time.perf_counter()
    spec = netcore.mlp([10, 8, 5])
    state = netcore.kaiming_normal_init(spec, 3)
    rng = np.random.default_rng(4)
    for k in state.weights:
        if k.endswith(".bias"):
            state.weights[k] = rng.normal(scale=0.1, size=state.weights[k].shape)
    x, y = rng.normal(size=(6, 10)), rng.integers(0, 5, 6)
    s = ProbVector({k: rng.uniform(0.1, 0.9, v) for k, v in spec.mask_shapes().items()})
    draw = sample_draw(s, counter_rng(4))
    tau = 1.0

    m = soft_mask(s, draw, tau).values
    _, gw, gm = netcore.loss_and_grads(spec, state, m, x, y)
    gs = chain_grad_to_prob(gm, s, draw, tau)
    loss_w = lambda: netcore.loss_and_grads(spec, state, m, x, y)[0]
    loss_s = lambda: netcore.loss_and_grads(spec, state, soft_mask(s, draw, tau).values, x, y)[0]

    names = list(state.weights)
    masked = list(s.segments)
    worst_w = worst_s = 0.0
    for _ in range(100):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(0, d)) for d in state.weights[name].shape)
        worst_w = max(worst_w, rel_err(gw[name][idx], central_diff(loss_w, state.weights[name], idx, 1e-5)))
        name = masked[rng.integers(len(masked))]
        idx = tuple(int(rng.integers(0, d)) for d in s.segments[name].shape)
        worst_s = max(worst_s, rel_err(gs[name][idx], central_diff(loss_s, s.segments[name], idx, 1e-6)))
    elapsed = time.perf_counter() - start
    record(4, "analytic gradients match finite differences",
           worst_w <= 1e-4 and worst_s <= 1e-4 and elapsed < 30,
           f"max rel err: weights {worst_w:.1e}, probabilities {worst_s:.1e} "
           f"(100 coords each) in {elapsed:.1f}s")


def test_5_schedules():
    p = ScheduleParams(T=40, t1=5, t2=25, k_f=0.1)
    exact = (temperature(0, p) == 1.0 and temperature(40, p) == 0.03
             and remaining_ratio(5, p) == 1.0 and remaining_ratio(25, p) == 0.1)
    mid_tau = abs(temperature(20, p) - 0.515)
    mid_k = abs(remaining_ratio(15, p) - 0.2125)
    record(5, "schedule endpoints and midpoints", exact and mid_tau <= 1e-12 and mid_k <= 1e-12,
           f"endpoints exact={exact}, midpoint errors tau {mid_tau:.1e}, k {mid_k:.1e}")


@pytest.fixture(scope="module")
def reference_runs(tmp_path_factory):
    """The reference configuration trained twice through the CLI."""
    dirs, times = [], []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"ref{i}")
        start = time.perf_counter()
        code = main(["train", "--config", str(REFERENCE), "--out", str(out),
                     "--dataset", f"mnist:{MNIST_DIR}"])
        times.append(time.perf_counter() - start)
        assert code == 0
        (run,) = list(out.iterdir())
        dirs.append(run)
    return dirs, times


@pytest.mark.slow
def test_6_convergence_to_binary(reference_runs):
    dirs, times = reference_runs
    last = list(csv.DictReader(open(dirs[0] / "report.csv")))[-1]
    mask = read_mask(dirs[0] / "mask.pmsk")
    ratio = sum(v.sum() for v in mask.values()) / sum(v.size for v in mask.values())
    fb = float(last["frac_binary"])
    ok = fb >= 0.90 and abs(ratio - 0.1) <= 0.01 and times[0] < 300
    record(6, "reference run ends near-binary at the target ratio", ok,
           f"frac_binary {fb:.3f}, remaining ratio {ratio:.4f} (round), "
           f"eval acc {float(last['acc']):.4f}, {times[0]:.0f}s")


@pytest.mark.slow
def test_7_global_beats_layerwise():
    base = reference_config()
    start = time.perf_counter()
    train_data, eval_data = base.load_data()
    spec = base.build_spec(train_data)
    summary, ok = [], True
    for k_f in (0.02, 0.01):
        med = {}
        for constraint in ("global", "layerwise"):
            accs = []
            for seed in range(5):
                cfg = dataclasses.replace(base.train, k_f=k_f, constraint=constraint, seed=seed)
                accs.append(train(spec, cfg, train_data, eval_data)[2].records[-1].acc)
            med[constraint] = float(np.median(accs))
        ok &= med["global"] >= med["layerwise"]
        summary.append(f"k_f={k_f}: global {med['global']:.4f} vs layerwise {med['layerwise']:.4f}")
    elapsed = time.perf_counter() - start
    record(7, "global budget >= layerwise budget (median of 5 seeds)",
           bool(ok) and elapsed < 1800, "; ".join(summary) + f"; {elapsed:.0f}s")


@pytest.mark.slow
def test_8_supermask():
    cfg = load_config(ROOT / "configs" / "supermask.yaml").with_overrides(
        dataset=f"mnist:{MNIST_DIR}")
    start = time.perf_counter()
    spec, (state, _, report) = run_reference(cfg)
    elapsed = time.perf_counter() - start
    init = netcore.kaiming_normal_init(spec, cfg.train.seed)
    frozen = all(state.weights[k].tobytes() == init.weights[k].tobytes() for k in init.weights)
    acc = report.records[-1].acc
    record(8, "supermask over frozen init weights", acc >= 0.5 and frozen and elapsed < 300,
           f"eval acc {acc:.4f} at k_f=0.5, weights unchanged={frozen}, {elapsed:.0f}s")


def test_9_s_factor():
    root = stationary_root()
    worst_even = 0.0
    s = 0.7
    lg = np.log(s / (1 - s))
    for g in np.linspace(-4, 4, 100):
        # r = logit(s) + g and -r = logit(s) + g_neg
        g_neg = -2 * lg - g
        for tau in (1.0, 0.3):
            a, b = s_factor(s, g, tau), s_factor(s, g_neg, tau)
            worst_even = max(worst_even, abs(a - b))
    S = [row[1] for row in s_factor_curve(0.99, 0.04, np.linspace(1.0, 0.03, 100)).rows]
    monotone = all(b < a for a, b in zip(S, S[1:]))
    ok = 1.5 <= root <= 1.6 and worst_even <= 1e-12 and monotone
    record(9, "S-factor root, evenness and monotone decay", ok,
           f"root {root:.10f}, max |S(r) - S(-r)| {worst_even:.1e}, "
           f"monotone over tau in [0.03, 1]: {monotone}")


@pytest.mark.slow
def test_10_determinism(reference_runs):
    dirs, _ = reference_runs
    names = ("mask.pmsk", "report.csv", "histogram.csv", "layer_ratio.csv")
    same = {n: (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names}
    record(10, "two reference runs are byte-identical", all(same.values()),
           ", ".join(f"{n} {'identical' if v else 'DIFFERS'}" for n, v in same.items()))
