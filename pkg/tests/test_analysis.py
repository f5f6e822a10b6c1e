import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppmlab.analysis import (
    ANALYSES,
    GRADIENT_CASE,
    BiasReport,
    conjugate_problem,
    de_bruijn_check,
    de_bruijn_random_pairs,
    diffuse_gaussian,
    dirac_kl_grad,
    effective_beta,
    fisher_term_closed_form,
    ikl_bias_experiment,
    ikl_omega_sweep,
    kl_contraction_ratios,
    kl_contraction_report,
    map_equivalence_check,
    map_grad,
    posterior_modes,
    ppm_gradient_check,
    random_gaussian,
    reddiff_mode_check,
    run_analysis,
    tempered_gaussian_posterior,
)
from ppmlab.baselines import BaselineConfig
from ppmlab.diffusion import TimeWeight, VpSchedule
from ppmlab.problems import GaussianMixture, analytic_posterior


def test_report_fields():
    r = BiasReport("x", 2.0, 2.5, 0.1, False)
    assert r.abs_gap == 0.5 and r.rel_gap == 0.25
    assert r.line().startswith("FAIL x:")
    assert set(r.to_dict()) >= {"experiment", "predicted", "measured", "abs_gap", "rel_gap", "tolerance", "passed"}


def test_kl_contraction_examples(sched):
    t_half = float(np.sqrt(2 * np.log(2) * 2 * 19.9 + 0.01) - 0.1) / 19.9  # alpha = 0.5
    assert sched.alpha(t_half) == pytest.approx(0.5, abs=1e-12)
    (t, r), = kl_contraction_ratios([2.0, 0.0], sched, [t_half])
    assert r == pytest.approx(0.25, abs=1e-12)
    assert kl_contraction_ratios([2.0, 0.0], sched, [0.0])[0][1] == 1.0
    with pytest.raises(ValueError):
        kl_contraction_ratios([0.0, 0.0], sched, [0.5])
    rep = kl_contraction_report()
    assert rep.passed and rep.details["max_gap"] < 1e-12


def test_effective_beta_examples(sched):
    flat = VpSchedule(0.0, 0.0, 1e-3, 1.0)
    assert effective_beta(TimeWeight(), flat) == pytest.approx(1.0 - 1e-3, abs=1e-12)
    n = 1_000_000
    t = sched.t_min + (np.arange(n) + 0.5) * (sched.t_max - sched.t_min) / n
    riemann = np.sum(sched.alpha(t) ** 2) * (sched.t_max - sched.t_min) / n
    assert effective_beta(TimeWeight(), sched) == pytest.approx(riemann, abs=1e-8)
    near = TimeWeight(value=3.0, lo=sched.t_min, hi=sched.t_min + 1e-4)
    assert effective_beta(near, sched) == pytest.approx(3.0 * 1e-4, rel=1e-3)
    assert effective_beta(lambda t: 1.0, sched) == pytest.approx(riemann, abs=1e-8)


def test_tempered_posterior_examples(conjugate):
    prior, prob = conjugate
    assert tempered_gaussian_posterior(prior, prob, 1.0)[0][0] == pytest.approx(1.0)
    assert tempered_gaussian_posterior(prior, prob, 0.5)[0][0] == pytest.approx(4 / 3)
    assert tempered_gaussian_posterior(prior, prob, 1e-9)[0][0] == pytest.approx(2.0, abs=1e-8)
    assert tempered_gaussian_posterior(prior, prob, 1e9)[0][0] == pytest.approx(0.0, abs=1e-8)
    with pytest.raises(ValueError):
        tempered_gaussian_posterior(prior, prob, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100))
def test_tempered_mean_monotone_in_beta(beta):
    prior, prob = conjugate_problem()
    a = tempered_gaussian_posterior(prior, prob, beta)[0][0]
    b = tempered_gaussian_posterior(prior, prob, beta * 1.5)[0][0]
    assert 0 < b < a < 2


def test_fisher_zero_for_equal(sched):
    q = random_gaussian(np.random.default_rng(0), 2)
    assert fisher_term_closed_form(q, q, sched, 0.3) == pytest.approx(0.0, abs=1e-12)


def test_fisher_matches_monte_carlo(sched):
    rng = np.random.default_rng(11)
    for _ in range(10):
        q, p = random_gaussian(rng, 2), random_gaussian(rng, 2)
        t = rng.uniform(0.05, 1.0)
        mq, Q = diffuse_gaussian(q, sched, t)
        mp, P = diffuse_gaussian(p, sched, t)
        x = mq + rng.standard_normal((1_000_000, 2)) @ np.linalg.cholesky(Q).T
        diff = -(x - mq) @ np.linalg.inv(Q) + (x - mp) @ np.linalg.inv(P)
        vals = (diff**2).sum(1)
        se = vals.std() / np.sqrt(len(vals))
        assert abs(vals.mean() - fisher_term_closed_form(q, p, sched, t)) < 3 * se


def test_de_bruijn(sched):
    q, p = (np.array([1.0, -0.5]), np.eye(2)), (np.zeros(2), np.eye(2))
    assert de_bruijn_check(q, p, sched, np.linspace(0.05, 0.95, 10)).passed
    rep = de_bruijn_random_pairs()
    assert rep.passed and rep.details["max_rel_err"] < 1e-3 and rep.details["n_pairs"] == 10


def test_map_identity_and_reddiff(conjugate, sched):
    prior, prob = conjugate
    grid = np.linspace(-2, 4, 100)[:, None]
    assert np.abs(dirac_kl_grad(prior, prob, grid) - map_grad(prior, prob, grid)).max() < 1e-12
    rep = map_equivalence_check(prior, prob, sched)
    assert rep.passed and rep.details["identity_gap"] < 1e-12 and rep.measured < 0.05


def test_reddiff_lands_on_local_modes(bimodal, sched):
    prior, prob = bimodal
    modes = posterior_modes(analytic_posterior(prior, prob))
    assert len(modes) == 2
    # a weight restricted to small t sees the unsmoothed mixture, so the end points are local modes
    cfg = BaselineConfig(method="reddiff", K=8, average_tail=0.5, omega=TimeWeight(lo=sched.t_min, hi=0.1))
    rep = reddiff_mode_check(prior, prob, sched, cfg)
    assert rep.passed, rep.details


def test_reddiff_default_weight_smooths_the_modes(bimodal, sched):
    # sigma^2/alpha puts most weight at large t where the two prior modes have merged
    prior, prob = bimodal
    rep = reddiff_mode_check(prior, prob, sched, BaselineConfig(method="reddiff", K=8, average_tail=0.5))
    assert rep.measured > 0.5


def test_gradient_check_at_one_time_and_null(sched):
    rep = ppm_gradient_check(GRADIENT_CASE[0], GRADIENT_CASE[1], sched, 0.25, n_draws=100_000)
    assert rep.passed and rep.details["rel_err"] < 0.02
    q = GRADIENT_CASE[1]
    from ppmlab.analysis import ppm_grad_samples

    g = ppm_grad_samples(q, q, sched, 0.4, 100_000, np.random.default_rng(0))
    se = g.std(0, ddof=1) / np.sqrt(len(g))
    assert np.all(np.abs(g.mean(0)) <= 3 * se + 1e-15)


def test_ikl_bias_default(conjugate, sched):
    prior, prob = conjugate
    rep = ikl_bias_experiment(prior, prob, sched)
    d = rep.details
    assert rep.passed, d
    assert d["tempered_err"] < 1e-2
    assert abs(d["measured_gap"] - d["predicted_gap"]) <= 0.1 * d["predicted_gap"]


def test_ikl_omega_sweep_monotone(conjugate, sched):
    prior, prob = conjugate
    pts = [p[0] for p in ikl_omega_sweep(prior, prob, sched)]
    assert all(b < a for a, b in zip(pts, pts[1:]))
    assert all(0 < p < 2 for p in pts)


def test_reports_reproducible_from_seed():
    a = [r.to_dict() for r in run_analysis("map-equivalence", seed=5)]
    b = [r.to_dict() for r in run_analysis("map-equivalence", seed=5)]
    assert a == b


@pytest.mark.parametrize("which", ["kl-contraction", "effective-beta", "de-bruijn"])
def test_run_analysis_fast(which):
    reps = run_analysis(which)
    assert reps and all(r.passed for r in reps)


def test_run_analysis_unknown():
    assert "gradient-check" in ANALYSES
    with pytest.raises(KeyError):
        run_analysis("nope")


def test_gaussian_helpers_reject_mixtures(sched):
    with pytest.raises(ValueError):
        diffuse_gaussian(GaussianMixture([0.5, 0.5], [[0.0], [1.0]], 1.0), sched, 0.5)
