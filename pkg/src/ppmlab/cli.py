"""Command line: ``ppmlab run|compare|analyze|oracle|plot``.

Exit codes: 0 success, 1 runtime failure (divergence, failed check, failed grid
cell), 2 usage or configuration error. The default output root is taken from
the ``PPMLAB_OUTPUT_ROOT`` environment variable (``runs`` when unset).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ppmlab.analysis import ANALYSES, run_analysis
from ppmlab.config import METHOD_NAMES, ConfigError, load_config
from ppmlab.harness import (
    compare,
    default_output,
    format_table,
    oracle_bundle,
    plot_runs,
    run_experiment,
    write_json,
)
from ppmlab.ppm import DivergenceError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _out(args, cfg, command):
    if args.out:
        return Path(args.out)
    stem = Path(args.config).stem if getattr(args, "config", None) else "analysis"
    return default_output(cfg, command, stem)


def _seeds(args, cfg):
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out(args, cfg, "run")
    rows = run_experiment(cfg, out, _seeds(args, cfg))
    for r in rows:
        print(f"{r['method']} seed={r['seed']} obs={r['observation']} coverage={r['coverage']:.3g} "
              f"diversity={r['diversity']:.4g} residual_rms={r['residual_rms']:.4g} "
              f"energy={r['energy_distance']:.4g}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    else:
        methods = list(cfg.compare) or [cfg.method.name]
    unknown = [m for m in methods if m not in METHOD_NAMES]
    if unknown:
        raise ConfigError(f"unknown method(s) {', '.join(unknown)} (expected one of {', '.join(METHOD_NAMES)})")
    out = _out(args, cfg, "compare")
    with open(args.config, encoding="utf-8") as fh:
        text = fh.read()
    table, failures = compare(text, methods, _seeds(args, cfg), out, args.jobs)
    print(format_table(table))
    for f in failures:
        print(f"FAILED {f['method']} seed={f['seed']}: {f['error']}", file=sys.stderr)
    print(f"artifacts: {out}")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_analyze(args) -> int:
    if args.which not in ANALYSES:
        raise ConfigError(f"unknown analysis {args.which!r} (expected one of {', '.join(ANALYSES)})")
    out = _out(args, None, "analyze")
    out.mkdir(parents=True, exist_ok=True)
    reports = run_analysis(args.which, 0 if args.seed is None else args.seed)
    for r in reports:
        print(r.line())
    write_json(out / f"{args.which}.json", [r.to_dict() for r in reports])
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    out = _out(args, cfg, "oracle")
    info = oracle_bundle(cfg, _seeds(args, cfg)[0], out, args.n_samples)
    post = info["posterior"]
    print(f"posterior: weights={post['weights']} means={post['means']}")
    if info.get("notice"):
        print(info["notice"])
    else:
        print(f"grid mass: {info['grid_mass']:.6f}")
    print(f"artifacts: {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        print(f"error: {run_dir} does not exist", file=sys.stderr)
        return EXIT_USAGE
    out_file = Path(args.out) if args.out else run_dir / "figure.svg"
    try:
        path = plot_runs(run_dir, out_file, Path(args.oracle) if args.oracle else None)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"figure: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppmlab", description="Posterior matching and baselines on Gaussian-mixture "
                                                           "inverse problems.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the configured method")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run a method-by-seed grid and tabulate")
    c.add_argument("--config", required=True)
    c.add_argument("--methods", help=f"comma-separated subset of {','.join(METHOD_NAMES)}")
    c.add_argument("--seed", type=int)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("analyze", help="closed-form bias and gradient checks")
    a.add_argument("which", help=f"one of {', '.join(ANALYSES)}")
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    o = sub.add_parser("oracle", help="analytic posterior, samples and density grid")
    o.add_argument("--config", required=True)
    o.add_argument("--seed", type=int)
    o.add_argument("--n-samples", type=int, default=10_000)
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    f = sub.add_parser("plot", help="SVG of final particles over posterior contours")
    f.add_argument("run_dir")
    f.add_argument("--oracle")
    f.add_argument("--out")
    f.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
