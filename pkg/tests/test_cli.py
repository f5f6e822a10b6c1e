import csv
import json
import re

import numpy as np
import pytest

from ppmlab.cli import main
from ppmlab.harness import derive_seed, verify_manifest

BIMODAL = """\
prior:
  weights: [0.5, 0.5]
  means: [[0.5, 4.0], [3.5, 4.0]]
  covs: 0.5
operator:
  kind: dense
  matrix: [[0.5, 1.0]]
sigma_y: 0.5
observation:
  y: [5.5]
method:
  name: ppm-vi
  K: 32
  iterations: 400
  lr_final: 0.01
compare:
  ppm-vi: {K: 32, iterations: 400, lr_final: 0.01}
  reddiff: {K: 8, iterations: 300}
evaluation: {n_ref: 200}
seeds: [0]
"""

CONJUGATE = """\
prior: {weights: [1.0], means: [[0.0]], covs: 1.0}
operator: {kind: dense, matrix: [[1.0]]}
sigma_y: 1.0
observation: {y: [2.0]}
method: {name: ppm-vi, K: 16, iterations: 30}
evaluation: {n_ref: 100}
"""


@pytest.fixture
def cfg_file(tmp_path):
    def make(text, name="exp.yaml"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)

    return make


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_artifacts(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", cfg_file(CONJUGATE), "--out", str(out)]) == 0
    for name in ("config.yaml", "metrics.csv", "particles.csv", "record.json", "manifest.json", "timing.json"):
        assert (out / name).exists()
    assert verify_manifest(out)
    rows = _rows(out / "metrics.csv")
    assert rows[0]["method"] == "ppm-vi" and rows[0]["status"] == "ok"
    assert "artifacts:" in capsys.readouterr().out


def test_run_deterministic_bytes(cfg_file, tmp_path):
    path = cfg_file(CONJUGATE)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", path, "--out", str(a)]) == 0
    assert main(["run", "--config", path, "--out", str(b)]) == 0
    for name in ("metrics.csv", "particles.csv", "record.json", "config.yaml", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_snapshot_reruns_identically(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg_file(BIMODAL.replace("iterations: 400", "iterations: 20")), "--seed", "3",
                 "--out", str(a)]) == 0
    assert "seeds:\n- 3" in (a / "config.yaml").read_text()
    assert main(["run", "--config", str(a / "config.yaml"), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_run_several_seeds(cfg_file, tmp_path):
    out = tmp_path / "seeds"
    text = CONJUGATE.replace("observation: {y: [2.0]}\n", "observation: {n_observations: 2}\n") + "seeds: [0, 1]\n"
    assert main(["run", "--config", cfg_file(text), "--out", str(out)]) == 0
    r0, r1 = _rows(out / "seed_0" / "metrics.csv"), _rows(out / "seed_1" / "metrics.csv")
    assert len(r0) == 2 and r0 != r1


def test_malformed_key_exit_2(cfg_file, capsys):
    assert main(["run", "--config", cfg_file(CONJUGATE + "sigmay: 1.0\n")]) == 2
    err = capsys.readouterr().err
    assert "sigmay" in err and "line 7" in err


def test_missing_file_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_divergence_exit_1(cfg_file, tmp_path, capsys):
    text = CONJUGATE.replace("y: [2.0]", "y: [1.0e7]").replace("iterations: 30", "iterations: 5, lr: 1.0e7, "
                                                                                 "lr_final: null")
    assert main(["run", "--config", cfg_file(text), "--out", str(tmp_path / "d")]) == 1
    assert "divergence at iteration" in capsys.readouterr().err


def test_default_output_root_from_env(cfg_file, tmp_path, monkeypatch):
    monkeypatch.setenv("PPMLAB_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--config", cfg_file(CONJUGATE, "conj.yaml")]) == 0
    assert (tmp_path / "root" / "conj" / "run" / "metrics.csv").exists()


def test_compare_bimodal_ppm_vs_reddiff(cfg_file, tmp_path, capsys):
    out = tmp_path / "cmp"
    text = BIMODAL.replace("seeds: [0]", "seeds: [0, 1, 2]")
    assert main(["compare", "--config", cfg_file(text), "--methods", "ppm-vi,reddiff", "--out", str(out)]) == 0
    table = {r["method"]: r for r in _rows(out / "comparison.csv")}
    assert float(table["ppm-vi"]["coverage_mean"]) == 1.0
    assert float(table["reddiff"]["coverage_mean"]) <= 0.5
    assert table["ppm-vi"]["runs_ok"] == "3"
    assert json.loads((out / "failures.json").read_text()) == []
    assert (out / "reddiff" / "seed_2" / "manifest.json").exists()
    assert "ppm-vi" in capsys.readouterr().out


def test_compare_degenerate_and_duplicate(cfg_file, tmp_path):
    path = cfg_file(BIMODAL.replace("iterations: 400", "iterations: 20"))
    out = tmp_path / "one"
    assert main(["compare", "--config", path, "--methods", "ppm-vi", "--out", str(out)]) == 0
    assert len(_rows(out / "comparison.csv")) == 1
    out = tmp_path / "dup"
    assert main(["compare", "--config", path, "--methods", "reddiff,reddiff", "--out", str(out)]) == 0
    rows = {r["method"]: r for r in _rows(out / "comparison.csv")}
    a, b = dict(rows["reddiff"]), dict(rows["reddiff_2"])
    a.pop("method"), b.pop("method")
    assert a == b


def test_compare_parallel_matches_serial(cfg_file, tmp_path):
    path = cfg_file(BIMODAL.replace("iterations: 400", "iterations: 20").replace("seeds: [0]", "seeds: [0, 1]"))
    a, b = tmp_path / "serial", tmp_path / "parallel"
    assert main(["compare", "--config", path, "--out", str(a)]) == 0
    assert main(["compare", "--config", path, "--jobs", "2", "--out", str(b)]) == 0
    assert (a / "comparison.csv").read_bytes() == (b / "comparison.csv").read_bytes()
    assert (a / "runs.csv").read_bytes() == (b / "runs.csv").read_bytes()


def test_compare_records_failures_and_continues(cfg_file, tmp_path, capsys):
    text = BIMODAL.replace(
        "reddiff: {K: 8, iterations: 300}", "reddiff: {K: 2, iterations: 5, lr: 1.0e9, lr_final: null}").replace(
        "ppm-vi: {K: 32, iterations: 400, lr_final: 0.01}", "ppm-vi: {K: 4, iterations: 5}")
    out = tmp_path / "fail"
    assert main(["compare", "--config", cfg_file(text), "--out", str(out)]) == 1
    failures = json.loads((out / "failures.json").read_text())
    assert [f["method"] for f in failures] == ["reddiff"]
    assert (out / "ppm-vi" / "seed_0" / "metrics.csv").exists()
    assert "FAILED reddiff" in capsys.readouterr().err


def test_compare_usage_errors(cfg_file, capsys):
    path = cfg_file(CONJUGATE)
    assert main(["compare", "--config", path, "--jobs", "0"]) == 2
    assert main(["compare", "--config", path, "--methods", "svgd"]) == 2
    assert "svgd" in capsys.readouterr().err


def test_analyze(tmp_path, capsys):
    assert main(["analyze", "kl-contraction", "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.startswith("PASS kl-contraction")
    rep = json.loads((tmp_path / "a" / "kl-contraction.json").read_text())
    assert rep[0]["passed"] and rep[0]["details"]["max_gap"] < 1e-12
    assert main(["analyze", "bogus", "--out", str(tmp_path / "b")]) == 2


def test_oracle_conjugate_and_bimodal(cfg_file, tmp_path, capsys):
    out = tmp_path / "o1"
    assert main(["oracle", "--config", cfg_file(CONJUGATE), "--out", str(out)]) == 0
    info = json.loads((out / "posterior.json").read_text())
    assert np.allclose(info["posterior"]["means"], [[1.0]]) and np.allclose(info["posterior"]["covariances"], 0.5)
    assert len(_rows(out / "samples.csv")) == 10_000
    out = tmp_path / "o2"
    assert main(["oracle", "--config", cfg_file(BIMODAL), "--out", str(out), "--n-samples", "500"]) == 0
    info = json.loads((out / "posterior.json").read_text())
    assert len(info["posterior"]["weights"]) == 2 and sum(info["posterior"]["weights"]) == pytest.approx(1.0)
    assert abs(info["grid_mass"] - 1.0) < 1e-3
    assert len(_rows(out / "grid.csv")) == 201 * 201


def test_oracle_high_dimension_notice(cfg_file, tmp_path, capsys):
    text = """\
prior: {weights: [1.0], means: [[0.0, 0.0, 0.0]], covs: 1.0}
operator: {kind: mask, indices: [0]}
observation: {y: [1.0]}
method: {name: ppm-vi}
"""
    out = tmp_path / "o3"
    assert main(["oracle", "--config", cfg_file(text), "--out", str(out), "--n-samples", "10"]) == 0
    assert "grid omitted" in capsys.readouterr().out
    assert not (out / "grid.csv").exists()


def test_plot(cfg_file, tmp_path):
    path = cfg_file(BIMODAL.replace("iterations: 400", "iterations: 20").replace("iterations: 300", "iterations: 20"))
    run, oracle, cmp = tmp_path / "run", tmp_path / "oracle", tmp_path / "cmp"
    assert main(["run", "--config", path, "--out", str(run)]) == 0
    assert main(["oracle", "--config", path, "--out", str(oracle), "--n-samples", "10"]) == 0
    assert main(["plot", str(run), "--oracle", str(oracle), "--out", str(tmp_path / "a.svg")]) == 0
    assert main(["plot", str(run), "--oracle", str(oracle), "--out", str(tmp_path / "b.svg")]) == 0
    a = (tmp_path / "a.svg").read_bytes()
    assert len(a) > 0 and a == (tmp_path / "b.svg").read_bytes()
    assert len(re.findall(rb'<g id="axes_\d+"', a)) == 1
    assert main(["compare", "--config", path, "--out", str(cmp)]) == 0
    assert main(["plot", str(cmp)]) == 0
    assert len(re.findall(rb'<g id="axes_\d+"', (cmp / "figure.svg").read_bytes())) == 2


def test_plot_missing_artifacts(tmp_path):
    assert main(["plot", str(tmp_path / "nowhere")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["plot", str(tmp_path / "empty")]) == 2


def test_derive_seed_streams_distinct():
    seeds = {derive_seed(0, k, i) for k in range(4) for i in range(10)}
    assert len(seeds) == 40 and derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
