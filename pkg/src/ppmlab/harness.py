"""Experiment runner: seeded runs, artifact directories, method grids, oracle bundles and figures.

Every run directory holds ``config.yaml`` (enough to re-run it), ``metrics.csv``,
``particles.csv``, ``record.json`` and ``manifest.json`` with SHA-256 hashes of
those four files. Wall-clock times go to ``timing.json``, which the manifest
leaves out so that identical config and seed give identical hashed bytes.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from ppmlab.baselines import run_baseline, run_ikl
from ppmlab.config import ExperimentConfig, MethodSpec, method_config, parse_config
from ppmlab.metrics import evaluate
from ppmlab.ppm import generate, run_ppm_amortized, run_ppm_vi
from ppmlab.problems import (
    GaussianMixture,
    LinearGaussianProblem,
    analytic_posterior,
    gmm_log_density,
    gmm_sample,
    simulate_observation,
)
from ppmlab.scores import AnalyticMixtureScore

OUTPUT_ROOT_ENV = "PPMLAB_OUTPUT_ROOT"
HASHED_FILES = ("config.yaml", "metrics.csv", "particles.csv", "record.json")
SUMMARY_METRICS = ("diversity", "diversity_offset", "coverage", "residual_rms", "energy_distance",
                   "posterior_mean_error")

# stream keys for the seed derivation
_OBS, _METHOD, _EVAL, _TEST = 0, 1, 2, 3


def derive_seed(master: int, *keys: int) -> int:
    """Independent 32-bit seed for the stream ``keys`` of a master seed."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stream(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=tuple(keys)))


def default_output(cfg: ExperimentConfig | None, command: str, stem: str = "experiment") -> Path:
    if cfg is not None and cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / stem / command


# ---------------------------------------------------------------------------
# observations


def observations(cfg: ExperimentConfig, seed: int) -> list:
    """Problem instances for a master seed; methods sharing a seed share these."""
    if cfg.y is not None:
        return [LinearGaussianProblem(cfg.operator, cfg.y, cfg.sigma_y, x_true=cfg.x_true)]
    rng = stream(seed, _OBS)
    return [simulate_observation(cfg.prior, cfg.operator, cfg.sigma_y, rng) for _ in range(cfg.n_observations)]


def amortized_split(cfg: ExperimentConfig, seed: int):
    """Training and held-out observation sets for the amortized methods."""
    rng = stream(seed, _OBS)
    train = [simulate_observation(cfg.prior, cfg.operator, cfg.sigma_y, rng) for _ in range(cfg.n_train)]
    rng = stream(seed, _TEST)
    test = [simulate_observation(cfg.prior, cfg.operator, cfg.sigma_y, rng) for _ in range(cfg.n_test)]
    return train, test


# ---------------------------------------------------------------------------
# a single run


def _eval_row(samples, prob, post, cfg: ExperimentConfig, rng) -> dict:
    row = evaluate(samples, prob, post, rng, cfg.n_ref, cfg.radius_multiplier).row()
    row["posterior_mean_error"] = float(np.linalg.norm(np.mean(samples, 0) - post.weights @ post.means))
    return row


def _final(scalars: dict) -> dict:
    return {f"final_{k}": (v[-1] if len(v) else None) for k, v in scalars.items()}


def run_method(cfg: ExperimentConfig, spec: MethodSpec, seed: int) -> dict:
    """Run one method for one master seed and evaluate it against the analytic posterior.

    Returns ``metrics`` rows, ``particles`` rows, a deterministic ``record`` and ``wall_time``.
    """
    s = cfg.schedule
    prior = AnalyticMixtureScore(cfg.prior, s)
    metrics, parts, runs = [], [], []
    wall = 0.0
    if spec.name.endswith("-ai"):
        train, test = amortized_split(cfg, seed)
        solver = method_config(spec, derive_seed(seed, _METHOD), s)
        if spec.name == "ppm-ai":
            gen, rec = run_ppm_amortized(solver, train, cfg.prior, s, prior)
        else:
            gen, rec = run_ikl(solver, train, cfg.prior, s, prior)
        wall += rec.wall_time
        h = getattr(solver, "h", 0.0)
        for i, prob in enumerate(test):
            rng = stream(seed, _EVAL, i)
            y = np.repeat(prob.y[None], cfg.samples_per_test, axis=0)
            samples = generate(gen, y, h, rng)
            post = analytic_posterior(cfg.prior, prob)
            metrics.append({"observation": i, **_eval_row(samples, prob, post, cfg, rng)})
            parts.append(samples)
            runs.append({"y": prob.y.tolist()})
        runs[0].update(_final(rec.scalars), iterations=rec.iterations)
        solver_dict = rec.config
    else:
        solver_dict = None
        for i, prob in enumerate(observations(cfg, seed)):
            solver = method_config(spec, derive_seed(seed, _METHOD, i), s)
            if spec.name == "ppm-vi":
                rec = run_ppm_vi(solver, prob, cfg.prior, s, prior)
            else:
                rec = run_baseline(solver, prob, cfg.prior, s, prior)
            wall += rec.wall_time
            post = analytic_posterior(cfg.prior, prob)
            rng = stream(seed, _EVAL, i)
            metrics.append({"observation": i, **_eval_row(rec.particles, prob, post, cfg, rng)})
            parts.append(rec.particles)
            runs.append({"y": prob.y.tolist(), "iterations": rec.iterations, **_final(rec.scalars)})
            solver_dict = solver_dict or {k: v for k, v in rec.config.items() if k != "seed"}
    for row in metrics:
        row.update(method=spec.name, seed=seed, status="ok")
    particle_rows = [
        {"method": spec.name, "seed": seed, "observation": i, "index": k,
         **{f"x{j}": float(v) for j, v in enumerate(p)}}
        for i, block in enumerate(parts) for k, p in enumerate(np.atleast_2d(block))
    ]
    record = {"method": spec.name, "seed": seed, "solver": solver_dict, "observations": runs}
    return {"metrics": metrics, "particles": particle_rows, "record": record, "wall_time": wall}


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, rows: list, leading=("method", "seed", "observation")):
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    cols = [k for k in leading if k in keys] + [k for k in keys if k not in leading]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row.get(k)) for k in cols])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    return repr(o)


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def snapshot(cfg: ExperimentConfig, spec: MethodSpec, seed: int) -> dict:
    """Resolved config for one run: the given method, the given seed, no compare block."""
    raw = copy.deepcopy(cfg.raw)
    if spec.name in cfg.compare:
        raw["method"] = {"name": spec.name, **(raw["compare"][spec.name] or {})}
    elif raw["method"]["name"] != spec.name:
        raw["method"] = {"name": spec.name}
    raw.pop("compare", None)
    raw.pop("output", None)
    raw["seeds"] = [seed]
    return raw


def write_run(out: Path, cfg: ExperimentConfig, spec: MethodSpec, seed: int, result: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(snapshot(cfg, spec, seed), sort_keys=True), encoding="utf-8")
    write_csv(out / "metrics.csv", result["metrics"])
    write_csv(out / "particles.csv", result["particles"])
    write_json(out / "record.json", result["record"])
    manifest = {"files": {name: sha256(out / name) for name in HASHED_FILES}}
    write_json(out / "manifest.json", manifest)
    write_json(out / "timing.json", {"wall_time_seconds": result["wall_time"]})
    return manifest


def verify_manifest(out: Path) -> bool:
    manifest = json.loads((Path(out) / "manifest.json").read_text())
    return all(sha256(Path(out) / name) == h for name, h in manifest["files"].items())


def run_experiment(cfg: ExperimentConfig, out: Path, seeds=None, spec: MethodSpec | None = None) -> list:
    """Run one method over seeds; one subdirectory per seed when there are several."""
    spec = cfg.method if spec is None else spec
    seeds = cfg.seeds if seeds is None else seeds
    rows = []
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        result = run_method(cfg, spec, seed)
        write_run(target, cfg, spec, seed, result)
        rows.extend(result["metrics"])
    return rows


# ---------------------------------------------------------------------------
# method grids


def _cell(args):
    text, name, seed, label, out = args
    cfg = parse_config(text)
    spec = cfg.compare.get(name) or (cfg.method if cfg.method.name == name else MethodSpec(name))
    target = Path(out) / label / f"seed_{seed}"
    try:
        result = run_method(cfg, spec, seed)
        write_run(target, cfg, spec, seed, result)
        return label, seed, result["metrics"], None
    except Exception as exc:  # a failed cell is recorded and the grid continues
        return label, seed, [], f"{type(exc).__name__}: {exc}"


def _labels(methods):
    seen, out = {}, []
    for m in methods:
        seen[m] = seen.get(m, 0) + 1
        out.append(m if seen[m] == 1 else f"{m}_{seen[m]}")
    return out


def summarize(rows: list, labels: list) -> list:
    """Per-method mean and standard error of the summary metrics over all evaluated rows."""
    table = []
    for label in labels:
        sel = [r for r in rows if r["label"] == label]
        ok = [r for r in sel if r["status"] == "ok"]
        entry = {"method": label, "runs_ok": len({r["seed"] for r in ok}),
                 "runs_failed": len({r["seed"] for r in sel if r["status"] != "ok"})}
        for key in SUMMARY_METRICS:
            vals = np.array([r[key] for r in ok if r.get(key) is not None], dtype=float)
            if vals.size == 0:
                entry[f"{key}_mean"] = entry[f"{key}_stderr"] = None
                continue
            entry[f"{key}_mean"] = float(vals.mean())
            entry[f"{key}_stderr"] = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        table.append(entry)
    return table


def compare(text: str, methods: list, seeds: list, out: Path, jobs: int = 1):
    """Method-by-seed grid sharing problem instances per seed; returns ``(table, failures)``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    labels = _labels(methods)
    tasks = [(text, m, seed, label, str(out)) for m, label in zip(methods, labels) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell, tasks))
    else:
        results = [_cell(t) for t in tasks]
    rows, failures = [], []
    for label, seed, metrics, err in results:
        if err is not None:
            failures.append({"method": label, "seed": seed, "error": err})
            rows.append({"label": label, "method": label, "seed": seed, "status": "failed: " + err})
        for r in metrics:
            rows.append({"label": label, **r})
    table = summarize(rows, labels)
    write_csv(out / "runs.csv", [{k: v for k, v in r.items() if k != "label"} | {"method": r["label"]}
                                 for r in rows])
    write_csv(out / "comparison.csv", table, leading=("method",))
    write_json(out / "failures.json", failures)
    return table, failures


def format_table(table: list) -> str:
    head = f"{'method':<12}{'ok':>4}" + "".join(f"{k:>26}" for k in SUMMARY_METRICS[:1] + SUMMARY_METRICS[2:])
    lines = [head]
    for e in table:
        cells = []
        for k in SUMMARY_METRICS[:1] + SUMMARY_METRICS[2:]:
            m, se = e[f"{k}_mean"], e[f"{k}_stderr"]
            cells.append(f"{'n/a':>26}" if m is None else f"{m:>15.4g} +- {se:<7.2g}")
        lines.append(f"{e['method']:<12}{e['runs_ok']:>4}" + "".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ground truth


def grid_density(post: GaussianMixture, n: int = 201, width: float = 6.0):
    """Posterior density on a regular grid; returns ``(axes, density, mass)`` for ``d <= 2``."""
    sd = np.sqrt(np.einsum("kii->ki", post.covs))
    lo = (post.means - width * sd).min(0)
    hi = (post.means + width * sd).max(0)
    axes = [np.linspace(lo[j], hi[j], n) for j in range(post.dim)]
    if post.dim == 1:
        pts = axes[0][:, None]
        dens = np.exp(gmm_log_density(post, pts))
        return axes, dens, float(np.trapezoid(dens, axes[0]))
    X, Y = np.meshgrid(*axes, indexing="ij")
    dens = np.exp(gmm_log_density(post, np.stack([X.ravel(), Y.ravel()], 1))).reshape(n, n)
    return axes, dens, float(np.trapezoid(np.trapezoid(dens, axes[1], axis=1), axes[0]))


def oracle_bundle(cfg: ExperimentConfig, seed: int, out: Path, n_samples: int = 10_000) -> dict:
    """Analytic posterior of the first observation, i.i.d. samples and (``d <= 2``) a density grid."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    prob = observations(cfg, seed)[0]
    post = analytic_posterior(cfg.prior, prob)
    samples = gmm_sample(post, stream(seed, _EVAL, 0), n_samples)
    info = {"y": prob.y.tolist(), "sigma_y": prob.sigma_y, "seed": seed, "posterior": post.to_dict(),
            "posterior_mean": (post.weights @ post.means).tolist()}
    write_csv(out / "samples.csv", [{f"x{j}": float(v) for j, v in enumerate(x)} for x in samples], leading=())
    if post.dim <= 2:
        axes, dens, mass = grid_density(post)
        info["grid_mass"] = mass
        if post.dim == 1:
            rows = [{"x0": float(a), "density": float(p)} for a, p in zip(axes[0], dens)]
        else:
            rows = [{"x0": float(axes[0][i]), "x1": float(axes[1][j]), "density": float(dens[i, j])}
                    for i in range(len(axes[0])) for j in range(len(axes[1]))]
        write_csv(out / "grid.csv", rows, leading=())
    else:
        info["grid_mass"] = None
        info["notice"] = f"grid omitted: dimension {post.dim} > 2"
    write_json(out / "posterior.json", info)
    return info


# ---------------------------------------------------------------------------
# figures


def _read_particles(run: Path, observation: int = 0):
    with open(run / "particles.csv", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["observation"]) == observation]
    if not rows:
        raise FileNotFoundError(f"no particles for observation {observation} in {run}")
    cols = sorted((k for k in rows[0] if k.startswith("x")), key=lambda k: int(k[1:]))
    return rows[0]["method"], np.array([[float(r[c]) for c in cols] for r in rows])


def _run_dirs(path: Path) -> list:
    if (path / "particles.csv").exists():
        return [path]
    runs = sorted(p.parent for p in path.rglob("particles.csv"))
    # one panel per method: the first seed directory of each
    seen, out = set(), []
    for r in runs:
        key = r.parent if r.name.startswith("seed_") else r
        if key not in seen:
            seen.add(key)
            out.append(r)
    if not out:
        raise FileNotFoundError(f"no run artifacts under {path}")
    return out


def plot_runs(path: Path, out_file: Path, oracle: Path | None = None) -> Path:
    """Scatter of final particles over posterior density contours, one panel per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    runs = _run_dirs(path)
    panels = []
    for r in runs:
        cfg = parse_config((r / "config.yaml").read_text(encoding="utf-8"))
        record = json.loads((r / "record.json").read_text())
        y = np.asarray(record["observations"][0]["y"])
        post = analytic_posterior(cfg.prior, LinearGaussianProblem(cfg.operator, y, cfg.sigma_y))
        method, x = _read_particles(r)
        panels.append((method, x, post))
    if oracle is not None:
        info = json.loads((Path(oracle) / "posterior.json").read_text())
        p = info["posterior"]
        ref = GaussianMixture(p["weights"], p["means"], p["covariances"])
        panels = [(m, x, ref) for m, x, _ in panels]

    with plt.rc_context({"svg.hashsalt": "ppmlab", "svg.fonttype": "path"}):
        fig, axs = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
        for ax, (method, x, post) in zip(axs[0], panels):
            axes, dens, _ = grid_density(post, n=121, width=4.0)
            if post.dim == 1:
                ax.plot(axes[0], dens, color="k", lw=1)
                ax.hist(x[:, 0], bins=30, density=True, alpha=0.5)
            else:
                ax.contour(axes[0], axes[1], dens.T, levels=8, colors="k", linewidths=0.6)
                ax.scatter(x[:, 0], x[:, 1], s=8, c="tab:red")
            ax.set_title(method)
        fig.tight_layout()
        out_file = Path(out_file)
        out_file.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_file, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_file


__all__ = [
    "HASHED_FILES",
    "OUTPUT_ROOT_ENV",
    "compare",
    "default_output",
    "derive_seed",
    "format_table",
    "grid_density",
    "observations",
    "oracle_bundle",
    "plot_runs",
    "run_experiment",
    "run_method",
    "summarize",
    "verify_manifest",
    "write_run",
]
