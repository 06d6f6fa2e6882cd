"""Command-line entry point: ``probmask {train,supermask,eval,project,diag}``.

Exit codes: 0 ok, 2 bad config/arguments/input, 3 training diverged,
4 unreadable or mismatched weight/mask files.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, fileio, netcore
from .config import ConfigError, RunConfig, build_spec, load_config, load_data, parse_dataset_flag
from .data import IDXError
from .masking import MaskSample, ProbVector
from .projection import project_global, project_layerwise
from .trainer import DivergenceError, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FILES = 0, 2, 3, 4

log = logging.getLogger("probmask")


def _err(msg: str) -> None:
    print(f"probmask: {msg}", file=sys.stderr)


def _prepare(args, mode: str | None) -> tuple[RunConfig, object, object]:
    cfg = load_config(args.config).with_overrides(args.seed, args.dataset, mode)
    try:
        train_data, eval_data = cfg.load_data()
    except (OSError, IDXError) as exc:
        raise ConfigError(f"cannot load dataset: {exc}") from exc
    return cfg, train_data, eval_data


def _run(args, mode: str | None) -> int:
    try:
        cfg, train_data, eval_data = _prepare(args, mode)
        spec = cfg.build_spec(train_data)
    except (ConfigError, netcore.InvalidSpecError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    run_dir = Path(args.out) / f"{cfg.digest()}-seed{cfg.train.seed}"
    if run_dir.exists():
        _err(f"refusing to overwrite existing run directory {run_dir}")
        return EXIT_CONFIG
    run_dir.mkdir(parents=True)
    (run_dir / "config.yaml").write_text(cfg.dump())

    try:
        state, s, report = train(spec, cfg.train, train_data, eval_data)
    except DivergenceError as exc:
        dump = run_dir / "divergence.npz"
        exc.dump(dump)
        _err(f"{exc}; state written to {dump}")
        return EXIT_DIVERGED

    fileio.write_tensors(run_dir / "weights.pmw", state.weights)
    fileio.write_tensors(run_dir / "probs.pmw", s.segments)
    fileio.write_mask(run_dir / "mask.pmsk", report.final_mask.values)
    report.write_csv(run_dir / "report.csv")
    diagnostics.prob_histogram(s).write_csv(run_dir / "histogram.csv")
    diagnostics.layer_remaining(report.final_mask).write_csv(run_dir / "layer_ratio.csv")

    acc = report.records[-1].acc if report.records else evaluate(spec, state, report.final_mask, eval_data)
    print(f"run directory: {run_dir}")
    print(f"accuracy: {acc:.4f}")
    print(f"remaining ratio: {report.achieved_ratio:.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run(args, None)


def cmd_supermask(args) -> int:
    return _run(args, "supermask")


def _mlp_from_weights(weights: dict) -> netcore.NetSpec:
    names = sorted({k.split(".")[0] for k in weights}, key=int)
    sizes = []
    for i, idx in enumerate(names):
        w = weights[f"{idx}.weight"]
        if w.ndim != 2:
            raise ConfigError("cannot infer a conv architecture from weights; pass --config")
        if i == 0:
            sizes.append(w.shape[1])
        sizes.append(w.shape[0])
    spec = netcore.mlp(sizes, bias=f"{names[0]}.bias" in weights)
    if set(spec.param_shapes()) != set(weights):
        raise ConfigError("weights do not look like an MLP checkpoint; pass --config")
    return spec


def cmd_eval(args) -> int:
    try:
        weights = fileio.read_tensors(args.weights)
        mask = fileio.read_mask(args.mask)
    except (OSError, fileio.FormatError) as exc:
        _err(str(exc))
        return EXIT_FILES
    try:
        if args.config:
            cfg = load_config(args.config)
            data = parse_dataset_flag(args.dataset, cfg.data) if args.dataset else cfg.data
            model = cfg.model
        else:
            if not args.dataset:
                raise ConfigError("eval needs --config or --dataset")
            data, model = parse_dataset_flag(args.dataset), None
        _, eval_data = load_data(data)
        spec = build_spec(model, eval_data) if model else _mlp_from_weights(weights)
    except (ConfigError, OSError, IDXError, netcore.InvalidSpecError) as exc:
        _err(str(exc))
        return EXIT_CONFIG

    expected = spec.param_shapes()
    bad = [f"weights[{k}]" for k in expected
           if k not in weights or weights[k].shape != expected[k]]
    bad += [f"mask[{k}]" for k in spec.mask_shapes()
            if k not in mask or mask[k].shape != expected[k]]
    bad += [f"mask[{k}]" for k in mask if k not in spec.mask_shapes()]
    if bad:
        _err(f"shape mismatch between network, weights and mask: {', '.join(bad)}")
        return EXIT_FILES

    state = netcore.NetState({k: weights[k] for k in expected})
    hard = MaskSample(mask, "hard")
    try:
        acc = evaluate(spec, state, hard, eval_data)
    except netcore.DimensionError as exc:
        _err(f"dataset does not fit the network: {exc}")
        return EXIT_FILES
    print(f"accuracy: {acc:.4f}")
    print(f"remaining ratio: {hard.remaining_ratio():.6f}")
    print("layer,ratio")
    for name, ratio in diagnostics.layer_remaining(hard).rows:
        print(f"{name},{ratio:.6f}")
    return EXIT_OK


def _read_vector_file(path) -> list[np.ndarray]:
    """Floats one per line; blank lines separate layers."""
    groups, current = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            if current:
                groups.append(current)
                current = []
            continue
        try:
            current.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number: {line!r}") from None
    if current:
        groups.append(current)
    if not groups:
        raise ValueError(f"{path}: no values")
    return [np.array(g) for g in groups]


def cmd_project(args) -> int:
    try:
        groups = _read_vector_file(args.input)
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        if args.mode == "global":
            results = [project_global(np.concatenate(groups), args.budget)]
            sizes = [len(g) for g in groups]
            flat = results[0].s
            outs = np.split(flat, np.cumsum(sizes)[:-1])
        else:
            results = project_layerwise(groups, args.budget)
            outs = [r.s for r in results]
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    text = "\n\n".join("\n".join(f"{v:.17g}" for v in seg) for seg in outs) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        report = sys.stdout
    else:
        sys.stdout.write(text)
        report = sys.stderr
    for i, r in enumerate(results):
        prefix = f"layer {i}: " if args.mode == "layerwise" else ""
        print(f"{prefix}v2* = {r.v_star:.17g}", file=report)
        print(f"{prefix}residual = {r.residual:.3e}", file=report)
    return EXIT_OK


def cmd_diag(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.probs and not args.s_curve:
        _err("diag needs --probs and/or --s-curve")
        return EXIT_CONFIG
    if args.probs:
        try:
            s = ProbVector(fileio.read_tensors(args.probs))
        except (OSError, fileio.FormatError) as exc:
            _err(str(exc))
            return EXIT_FILES
        hist = diagnostics.prob_histogram(s, args.bins)
        hist.write_csv(out / "histogram.csv")
        diagnostics.layer_remaining(s).write_csv(out / "layer_ratio.csv")
        print(f"frac_binary: {hist.scalars['frac_binary']:.6f}")
    if args.s_curve:
        s_i, g = args.s_curve
        taus = np.linspace(1.0, 0.03, args.points)
        try:
            curve = diagnostics.s_factor_curve(s_i, g, taus)
        except ValueError as exc:
            _err(str(exc))
            return EXIT_CONFIG
        curve.write_csv(out / "s_curve.csv")
        print(f"stationary root of y - 2y*sigmoid(y) + 1: {curve.scalars['root']:.10f}")
        print(f"r = {curve.scalars['r']:.6f}, S peaks at tau = {curve.scalars['peak_tau']:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probmask", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("train", cmd_train, "prune: learn weights and mask"),
                            ("supermask", cmd_supermask, "learn a mask over frozen init weights")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="runs")
        p.add_argument("--seed", type=int)
        p.add_argument("--dataset", help="mnist:<dir> or blobs:<seed>")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="accuracy of weights under a mask")
    p.add_argument("--weights", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--config")
    p.add_argument("--dataset", help="mnist:<dir> or blobs:<seed>")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="project a vector onto {0 <= s <= 1, sum(s) <= K}")
    p.add_argument("--input", required=True, help="one float per line")
    p.add_argument("--budget", type=float, required=True,
                   help="K for --mode global, remaining ratio k for --mode layerwise")
    p.add_argument("--mode", choices=("global", "layerwise"), default="global")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("diag", help="histogram / layer ratios / S-factor curve as CSV")
    p.add_argument("--probs", help="probabilities file written by train")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--s-curve", nargs=2, type=float, metavar=("S", "G"))
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
