"""Closed-form checks of the bias claims on Gaussian cases.

Every experiment here returns a :class:`BiasReport` that pairs a closed-form
prediction with a measured value. Gaussians are passed either as single-
component :class:`GaussianMixture` objects or as ``(mean, cov)`` pairs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from ppmlab.baselines import BaselineConfig, run_ikl, run_reddiff
from ppmlab.diffusion import TimeWeight, VpSchedule
from ppmlab.metrics import gaussian_kl
from ppmlab.ppm import _rng, ppm_prior_grad
from ppmlab.problems import GaussianMixture, LinearGaussianProblem, analytic_posterior, gmm_log_density
from ppmlab.scores import AnalyticMixtureScore


@dataclass
class BiasReport:
    experiment: str
    predicted: float
    measured: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    @property
    def abs_gap(self) -> float:
        return float(abs(self.measured - self.predicted))

    @property
    def rel_gap(self) -> float:
        return self.abs_gap / max(abs(self.predicted), 1e-300)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["abs_gap"] = self.abs_gap
        out["rel_gap"] = self.rel_gap
        return out

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.experiment}: predicted={self.predicted:.6g} measured={self.measured:.6g} "
                f"abs_gap={self.abs_gap:.3g} tol={self.tolerance:.3g}")


def _gauss(g):
    if isinstance(g, GaussianMixture):
        if g.n_components != 1:
            raise ValueError("expected a single Gaussian")
        return g.means[0], g.covs[0]
    mean, cov = g
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    return mean, cov * np.eye(mean.size) if cov.ndim < 2 else cov


def diffuse_gaussian(g, s: VpSchedule, t):
    """``(alpha m, alpha^2 S + sigma^2 I)`` at time ``t`` (``t = 0`` returns ``g`` itself)."""
    m, c = _gauss(g)
    if t == 0:
        return m, c
    a, sg = s.alpha_sigma(t)
    return a * m, a**2 * c + sg**2 * np.eye(m.size)


def diffused_kl(q, p, s: VpSchedule, t) -> float:
    """``KL(q_t || p_t)`` for Gaussians."""
    return gaussian_kl(*diffuse_gaussian(q, s, t), *diffuse_gaussian(p, s, t))


def kl_contraction_ratios(delta, s: VpSchedule, t_grid):
    """``KL(q_t || p_t) / KL(q_0 || p_0)`` for ``q = N(delta, I)``, ``p = N(0, I)``."""
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    if not np.any(delta):
        raise ValueError("delta must be nonzero")
    eye = np.eye(delta.size)
    q, p = (delta, eye), (np.zeros_like(delta), eye)
    base = diffused_kl(q, p, s, 0)
    return [(float(t), diffused_kl(q, p, s, t) / base) for t in t_grid]


def kl_contraction_report(delta=(2.0, 0.0), s: VpSchedule | None = None, n_grid: int = 50, tol=1e-12) -> BiasReport:
    s = VpSchedule() if s is None else s
    grid = np.linspace(s.t_min, s.t_max, n_grid)
    ratios = kl_contraction_ratios(delta, s, grid)
    gaps = [abs(r - s.alpha(t) ** 2) for t, r in ratios]
    worst = int(np.argmax(gaps))
    t_w, r_w = ratios[worst]
    return BiasReport("kl-contraction", float(s.alpha(t_w) ** 2), r_w, tol, max(gaps) < tol,
                      {"max_gap": max(gaps), "n_grid": n_grid, "delta": list(np.atleast_1d(delta))})


def effective_beta(omega, s: VpSchedule, tol: float = 1e-10) -> float:
    """``beta = int omega(t) alpha_t^2 dt`` over the schedule range.

    ``omega`` is a :class:`TimeWeight` or a plain callable of ``t``.
    """
    if not isinstance(omega, TimeWeight):
        omega = TimeWeight("function", fn=omega)
    return float(omega.integrate(lambda t: s.alpha(t) ** 2, s, tol))


def tempered_gaussian_posterior(prior, prob: LinearGaussianProblem, beta: float):
    """Moments of the density proportional to ``p(y | x) p(x)^beta`` (Gaussian prior)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    m, c = _gauss(prior)
    F = prob.operator.to_dense()
    prec = beta * np.linalg.inv(c) + F.T @ F / prob.sigma_y**2
    cov = np.linalg.inv(prec)
    mean = cov @ (beta * np.linalg.solve(c, m) + F.T @ prob.y / prob.sigma_y**2)
    return mean, cov


def fisher_term_closed_form(q, p, s: VpSchedule, t) -> float:
    """``E_{q_t} |grad log q_t - grad log p_t|^2`` for Gaussians.

    With ``z = x - alpha m_q ~ N(0, Q)`` the score difference is
    ``D z + alpha P^{-1} (m_q - m_p)``, ``D = P^{-1} - Q^{-1}``, so the
    expectation is ``tr(D Q D) + alpha^2 |P^{-1} (m_q - m_p)|^2``.
    """
    mq, _ = _gauss(q)
    mp, _ = _gauss(p)
    a = s.alpha(t)
    _, Q = diffuse_gaussian(q, s, t)
    _, P = diffuse_gaussian(p, s, t)
    Pinv = np.linalg.inv(P)
    D = Pinv - np.linalg.inv(Q)
    shift = a * Pinv @ (mq - mp)
    return float(np.trace(D @ Q @ D) + shift @ shift)


def random_gaussian(rng: np.random.Generator, d: int, spread: float = 1.0):
    """Random mean and well-conditioned SPD covariance."""
    A = rng.normal(size=(d, d)) / np.sqrt(d)
    return spread * rng.normal(size=d), A @ A.T + 0.3 * np.eye(d)


def de_bruijn_check(q, p, s: VpSchedule, t_grid, rel_step: float = 1e-5, tol: float = 1e-3) -> BiasReport:
    """Central difference of ``KL(q_t || p_t)`` in ``t`` against ``-g^2/2`` times the Fisher term."""
    worst, pred_w, meas_w = 0.0, 0.0, 0.0
    for t in t_grid:
        h = rel_step * max(t, 1e-3)
        dkl = (diffused_kl(q, p, s, t + h) - diffused_kl(q, p, s, t - h)) / (2 * h)
        pred = -0.5 * s.g2(t) * fisher_term_closed_form(q, p, s, t)
        err = abs(dkl - pred) / max(abs(pred), 1e-300)
        if err >= worst:
            worst, pred_w, meas_w = err, pred, dkl
    return BiasReport("de-bruijn", float(pred_w), float(meas_w), tol, worst < tol, {"max_rel_err": worst})


def de_bruijn_random_pairs(n_pairs=10, d=2, seed=0, s: VpSchedule | None = None, tol=1e-3) -> BiasReport:
    s = VpSchedule() if s is None else s
    rng = _rng(seed)
    grid = np.linspace(s.t_min + 0.01, s.t_max - 0.01, 20)
    reports = [de_bruijn_check(random_gaussian(rng, d), random_gaussian(rng, d), s, grid, tol=tol)
               for _ in range(n_pairs)]
    worst = max(reports, key=lambda r: r.details["max_rel_err"])
    return BiasReport("de-bruijn", worst.predicted, worst.measured, tol, all(r.passed for r in reports),
                      {"max_rel_err": worst.details["max_rel_err"], "n_pairs": n_pairs, "seed": seed})


# ---------------------------------------------------------------------------
# MAP equivalence of the Dirac objective


def dirac_kl_grad(prior: GaussianMixture, prob: LinearGaussianProblem, mu):
    """Gradient of ``-log p(y | mu) - log p(mu)``; a point mass has no entropy gradient."""
    mu = np.atleast_2d(mu)
    m, c = _gauss(prior)
    return -prob.likelihood_score(mu) + (mu - m) @ np.linalg.inv(c)


def map_grad(prior: GaussianMixture, prob: LinearGaussianProblem, mu):
    """Gradient of ``-log p(mu | y)`` through the conjugate posterior."""
    post = analytic_posterior(prior, prob)
    return (np.atleast_2d(mu) - post.means[0]) @ np.linalg.inv(post.covs[0])


def posterior_modes(post: GaussianMixture):
    """Local maxima of a mixture density, found by ascent from each component mean."""
    modes = []
    for m in post.means:
        res = minimize(lambda x: -gmm_log_density(post, x), m, method="BFGS", options={"gtol": 1e-10})
        if not any(np.linalg.norm(res.x - q) < 1e-4 for q in modes):
            modes.append(res.x)
    return np.array(modes)


def map_equivalence_check(prior, prob: LinearGaussianProblem, s: VpSchedule | None = None,
                          cfg: BaselineConfig | None = None, n_grid: int = 100, tol: float = 0.05) -> BiasReport:
    """(a) Dirac-KL and MAP gradients agree on a grid; (b) RED-Diff lands on the MAP."""
    s = VpSchedule() if s is None else s
    prior = prior if isinstance(prior, GaussianMixture) else GaussianMixture.gaussian(*_gauss(prior))
    post = analytic_posterior(prior, prob)
    lo, hi = post.means[0] - 3.0, post.means[0] + 3.0
    grid = lo + (hi - lo) * np.linspace(0, 1, n_grid)[:, None]
    identity_gap = float(np.abs(dirac_kl_grad(prior, prob, grid) - map_grad(prior, prob, grid)).max())
    cfg = BaselineConfig(method="reddiff", K=4, average_tail=0.5) if cfg is None else cfg
    rec = run_reddiff(cfg, prob, AnalyticMixtureScore(prior, s), s)
    gap = float(np.linalg.norm(rec.particles - post.means[0], axis=1).max())
    return BiasReport("map-equivalence", 0.0, gap, tol, identity_gap < 1e-12 and gap < tol,
                      {"identity_gap": identity_gap, "map": post.means[0].tolist(),
                       "reddiff_points": rec.particles.tolist(), "seed": cfg.seed})


def reddiff_mode_check(prior_mix: GaussianMixture, prob: LinearGaussianProblem, s: VpSchedule,
                       cfg: BaselineConfig, tol: float = 0.1) -> BiasReport:
    """Distance from each RED-Diff end point to its nearest posterior mode."""
    modes = posterior_modes(analytic_posterior(prior_mix, prob))
    rec = run_reddiff(cfg, prob, AnalyticMixtureScore(prior_mix, s), s)
    dist = np.linalg.norm(rec.particles[:, None] - modes[None], axis=-1).min(1)
    return BiasReport("reddiff-modes", 0.0, float(dist.max()), tol, bool(dist.max() < tol),
                      {"modes": modes.tolist(), "points": rec.particles.tolist()})


# ---------------------------------------------------------------------------
# Monte-Carlo check of the posterior-matching gradient


def _fisher_fd_grad(q, p, s, t, step=1e-5):
    mq, cq = _gauss(q)
    out = np.zeros_like(mq)
    for i in range(mq.size):
        e = np.zeros_like(mq)
        e[i] = step
        out[i] = (fisher_term_closed_form((mq + e, cq), p, s, t)
                  - fisher_term_closed_form((mq - e, cq), p, s, t)) / (2 * step)
    return out


def ppm_grad_samples(q, p, s: VpSchedule, t, n: int, rng):
    """``n`` single-draw gradient estimates in the mean of ``q`` at fixed ``t``."""
    mq, cq = _gauss(q)
    aux = AnalyticMixtureScore(GaussianMixture.gaussian(mq, cq), s)
    prior = AnalyticMixtureScore(GaussianMixture.gaussian(*_gauss(p)), s)
    x0 = mq + rng.standard_normal((n, mq.size)) @ np.linalg.cholesky(cq).T
    eps = rng.standard_normal((n, mq.size))
    g, _ = ppm_prior_grad(x0, aux, prior, s, np.full(n, float(t)), eps, include_g2=False)
    return g


def ppm_gradient_check(q, p, s: VpSchedule, t: float, n_draws: int = 100_000, seed: int = 0,
                       tol: float = 0.02) -> BiasReport:
    """Monte-Carlo mean of the estimator against finite differences of the closed-form Fisher term."""
    rng = _rng(seed)
    g = ppm_grad_samples(q, p, s, t, n_draws, rng)
    mc = g.mean(0)
    se = g.std(0, ddof=1) / np.sqrt(n_draws)
    fd = _fisher_fd_grad(q, p, s, t)
    rel = float(np.linalg.norm(mc - fd) / max(np.linalg.norm(fd), 1e-300))
    return BiasReport(f"gradient-check(t={t:g})", float(np.linalg.norm(fd)), float(np.linalg.norm(mc)), tol,
                      rel < tol, {"rel_err": rel, "mc": mc.tolist(), "fd": fd.tolist(), "stderr": se.tolist(),
                                  "n_draws": n_draws, "seed": seed})


def gradient_error_slope(q, p, s: VpSchedule, t: float, sizes=(1_000, 10_000, 100_000), reps: int = 32,
                         seed: int = 0):
    """Log-log slope of the RMS Monte-Carlo error against the number of draws."""
    rng = _rng(seed)
    fd = _fisher_fd_grad(q, p, s, t)
    rms = []
    for n in sizes:
        errs = [np.linalg.norm(ppm_grad_samples(q, p, s, t, n, rng).mean(0) - fd) for _ in range(reps)]
        rms.append(float(np.sqrt(np.mean(np.square(errs)))))
    slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
    return float(slope), rms


GRADIENT_CASE = (
    (np.array([1.5, 1.0]), 0.25 * np.eye(2)),
    (np.array([0.3, -0.2]), np.array([[1.0, 0.2], [0.2, 0.6]])),
)
GRADIENT_TIMES = (0.1, 0.25, 0.4, 0.6, 0.9)


# ---------------------------------------------------------------------------
# IKL tempering


def ikl_fixed_point(prior, prob: LinearGaussianProblem, s: VpSchedule, cfg: BaselineConfig):
    """Run IKL with a single unit-covariance Gaussian as the variational family."""
    prior = prior if isinstance(prior, GaussianMixture) else GaussianMixture.gaussian(*_gauss(prior))
    rec = run_ikl(cfg, prob, prior, s)
    trace = np.asarray(rec.scalars["residual_rms"])
    window = max(len(trace) // 10, 1)
    drift = float(abs(trace[-window:].mean() - trace[-2 * window : -window].mean()))
    return rec.particles[0], drift


def default_ikl_config(omega: TimeWeight | None = None, seed: int = 0) -> BaselineConfig:
    return BaselineConfig(method="ikl", K=1, particle_scale=1.0, omega=omega, iterations=3000, lr=0.05,
                          lr_final=0.001, n_draws=16, average_tail=0.5, seed=seed)


def ikl_bias_experiment(prior, prob: LinearGaussianProblem, s: VpSchedule | None = None,
                        omega: TimeWeight | None = None, cfg: BaselineConfig | None = None,
                        tol: float = 1e-2, gap_tol: float = 0.1) -> BiasReport:
    """IKL fixed point against the beta-tempered posterior and the true MAP."""
    s = VpSchedule() if s is None else s
    omega = TimeWeight() if omega is None else omega
    cfg = default_ikl_config(omega) if cfg is None else cfg
    beta = effective_beta(omega, s)
    tempered, _ = tempered_gaussian_posterior(prior, prob, beta)
    true_map, _ = tempered_gaussian_posterior(prior, prob, 1.0)
    point, drift = ikl_fixed_point(prior, prob, s, cfg)
    pred_gap = float(np.linalg.norm(tempered - true_map))
    meas_gap = float(np.linalg.norm(point - true_map))
    err = float(np.linalg.norm(point - tempered))
    gap_ok = abs(meas_gap - pred_gap) <= gap_tol * pred_gap if pred_gap > 0 else meas_gap < tol
    converged = drift < tol
    return BiasReport("ikl-bias", float(np.linalg.norm(tempered)), float(np.linalg.norm(point)), tol,
                      bool(err < tol and gap_ok and converged),
                      {"beta": beta, "tempered_mean": tempered.tolist(), "map": true_map.tolist(),
                       "fixed_point": point.tolist(), "predicted_gap": pred_gap, "measured_gap": meas_gap,
                       "tempered_err": err, "converged": converged, "seed": cfg.seed})


def ikl_omega_sweep(prior, prob: LinearGaussianProblem, s: VpSchedule, scales=(0.5, 1.0, 2.0, 4.0), seed: int = 0):
    """IKL fixed points for ``omega = c`` across scales ``c``."""
    return [ikl_fixed_point(prior, prob, s, default_ikl_config(TimeWeight(value=c), seed))[0] for c in scales]


# ---------------------------------------------------------------------------
# documented defaults for the command line


def conjugate_problem():
    """Prior ``N(0, 1)``, ``F = 1``, ``y = 2``, ``sigma_y = 1``: posterior ``N(1, 1/2)``."""
    from ppmlab.problems import LinearOperator

    prior = GaussianMixture.gaussian([0.0], [[1.0]])
    return prior, LinearGaussianProblem(LinearOperator.dense([[1.0]]), [2.0], 1.0)


def effective_beta_report(s: VpSchedule | None = None, tol: float = 1e-8) -> list:
    """In-house quadrature of ``beta`` against scipy's for the constant and SNR weights."""
    from scipy.integrate import quad

    from ppmlab.baselines import snr_weight

    s = VpSchedule() if s is None else s
    out = []
    for name, omega in (("constant", TimeWeight()), ("snr", snr_weight(s))):
        beta = effective_beta(omega, s)
        ref = quad(lambda t: float(omega(t)) * s.alpha(t) ** 2, s.t_min, s.t_max, epsabs=1e-13, epsrel=1e-13)[0]
        out.append(BiasReport(f"effective-beta({name})", ref, beta, tol, abs(beta - ref) < tol * max(ref, 1.0),
                              {"omega": name}))
    return out


def gradient_check_report(seed: int = 0) -> list:
    q, p = GRADIENT_CASE
    s = VpSchedule()
    reports = [ppm_gradient_check(q, p, s, t, seed=seed) for t in GRADIENT_TIMES]
    slope, rms = gradient_error_slope(q, p, s, GRADIENT_TIMES[2], seed=seed)
    reports.append(BiasReport("gradient-slope", -0.5, slope, 0.1, abs(slope + 0.5) < 0.1, {"rms": rms}))
    return reports


def run_analysis(which: str, seed: int = 0) -> list:
    """Reports for one experiment id of :data:`ANALYSES`."""
    prior, prob = conjugate_problem()
    if which == "kl-contraction":
        return [kl_contraction_report()]
    if which == "effective-beta":
        return effective_beta_report()
    if which == "ikl-bias":
        return [ikl_bias_experiment(prior, prob, cfg=default_ikl_config(TimeWeight(), seed))]
    if which == "map-equivalence":
        return [map_equivalence_check(prior, prob, cfg=BaselineConfig(method="reddiff", K=4, average_tail=0.5,
                                                                      seed=seed))]
    if which == "gradient-check":
        return gradient_check_report(seed)
    if which == "de-bruijn":
        return [de_bruijn_random_pairs(seed=seed)]
    raise KeyError(f"unknown analysis {which!r}; expected one of {', '.join(ANALYSES)}")


ANALYSES = ("kl-contraction", "effective-beta", "ikl-bias", "map-equivalence", "gradient-check", "de-bruijn")


__all__ = [
    "ANALYSES",
    "BiasReport",
    "GRADIENT_CASE",
    "GRADIENT_TIMES",
    "de_bruijn_check",
    "de_bruijn_random_pairs",
    "diffuse_gaussian",
    "diffused_kl",
    "dirac_kl_grad",
    "effective_beta",
    "fisher_term_closed_form",
    "gradient_error_slope",
    "ikl_bias_experiment",
    "ikl_fixed_point",
    "ikl_omega_sweep",
    "conjugate_problem",
    "effective_beta_report",
    "gradient_check_report",
    "run_analysis",
    "kl_contraction_ratios",
    "kl_contraction_report",
    "map_equivalence_check",
    "map_grad",
    "posterior_modes",
    "ppm_gradient_check",
    "ppm_grad_samples",
    "random_gaussian",
    "reddiff_mode_check",
    "tempered_gaussian_posterior",
]
