"""Evaluation: diversity, mode coverage, energy distance, Gaussian KL, residuals."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist


def diversity(samples) -> float:
    """One minus the mean pairwise cosine similarity.

    ``samples`` is ``(N, d)`` for one observation or ``(O, N, d)`` for several,
    in which case the per-observation similarities are averaged first.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] < 2:
        raise ValueError("diversity needs at least two samples per observation")
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("diversity is undefined for zero-norm samples")
    u = x / norms
    n = x.shape[1]
    sims = []
    for obs in u:
        gram = obs @ obs.T
        sims.append((gram.sum() - np.trace(gram)) / (n * (n - 1)))
    return float(1.0 - np.mean(sims))


def mode_coverage(particles, posterior, radius_multiplier: float = 3.0):
    """Assign each particle to the Mahalanobis-nearest component within the radius.

    Returns ``(coverage, fractions)``: the share of components with at least one
    particle and the per-component assigned share of particles.
    """
    x = np.atleast_2d(np.asarray(particles, dtype=float))
    prec = np.linalg.inv(posterior.covs)
    diff = x[:, None, :] - posterior.means[None]
    maha = np.sqrt(np.einsum("nki,kij,nkj->nk", diff, prec, diff))
    nearest = maha.argmin(1)
    inside = maha[np.arange(len(x)), nearest] <= radius_multiplier
    counts = np.bincount(nearest[inside], minlength=posterior.n_components)
    return float(np.mean(counts > 0)), counts / len(x)


def _mean_dist(a, b, chunk=2048):
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i : i + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(a, b) -> float:
    """V-statistic ``2 E|A-B| - E|A-A'| - E|B-B'|``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise ValueError("energy distance needs nonempty samples")
    return max(2 * _mean_dist(a, b) - _mean_dist(a, a) - _mean_dist(b, b), 0.0)


def energy_test(a, b, rng, n_perm: int = 500):
    """Permutation two-sample test on the energy distance; returns ``(statistic, p_value)``."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    pooled = np.vstack([a, b])
    dist = cdist(pooled, pooled)
    n, m = len(a), len(b)

    def stat(mask):
        ia, ib = np.flatnonzero(mask), np.flatnonzero(~mask)
        return (2 * dist[np.ix_(ia, ib)].mean() - dist[np.ix_(ia, ia)].mean() - dist[np.ix_(ib, ib)].mean())

    mask = np.zeros(n + m, dtype=bool)
    mask[:n] = True
    observed = stat(mask)
    exceed = 0
    for _ in range(n_perm):
        exceed += stat(rng.permutation(mask)) >= observed
    return observed, (exceed + 1) / (n_perm + 1)


def gaussian_kl(mean_q, cov_q, mean_p, cov_p) -> float:
    """``KL(N(mean_q, cov_q) || N(mean_p, cov_p))``."""
    mq = np.atleast_1d(np.asarray(mean_q, dtype=float))
    mp = np.atleast_1d(np.asarray(mean_p, dtype=float))
    d = mq.size
    cq = np.asarray(cov_q, dtype=float) * (np.eye(d) if np.ndim(cov_q) < 2 else 1)
    cp = np.asarray(cov_p, dtype=float) * (np.eye(d) if np.ndim(cov_p) < 2 else 1)
    lq = np.linalg.cholesky(cq)
    lp = np.linalg.cholesky(cp)
    solve = np.linalg.solve(lp, lq)
    diff = np.linalg.solve(lp, mp - mq)
    logdet = 2 * (np.log(np.diag(lp)).sum() - np.log(np.diag(lq)).sum())
    return float(0.5 * ((solve**2).sum() + diff @ diff - d + logdet))


def residual_rms(prob, particles) -> float:
    """Root mean square over particles of ``||y - F mu_k||``."""
    r = prob.residual(np.atleast_2d(particles))
    return float(np.sqrt(np.mean((r**2).sum(-1))))


@dataclass
class EvalSummary:
    diversity: float
    diversity_offset: float
    residual_rms: float
    coverage: float
    fractions: list
    energy_distance: float
    gaussian_kl: float | None = None

    def row(self) -> dict:
        out = asdict(self)
        fr = out.pop("fractions")
        for i, f in enumerate(fr):
            out[f"fraction_{i}"] = f
        return out


def evaluate(particles, prob, posterior, rng, n_ref: int = 2000, radius_multiplier: float = 3.0) -> EvalSummary:
    """Summary of a particle set against the exact posterior mixture."""
    from ppmlab.problems import gmm_sample

    x = np.atleast_2d(np.asarray(particles, dtype=float))
    ref = gmm_sample(posterior, rng, n_ref)
    cov, fr = mode_coverage(x, posterior, radius_multiplier)
    # raw cosine is degenerate for zero-mean toys, so also report it after shifting
    # the particles into the positive orthant
    shift = x - np.minimum(x.min(0), ref.min(0)) + 1.0
    kl = None
    if posterior.n_components == 1 and len(x) > x.shape[1] + 1:
        emp_cov = np.cov(x.T, bias=True).reshape(x.shape[1], x.shape[1])
        try:
            kl = gaussian_kl(x.mean(0), emp_cov, posterior.means[0], posterior.covs[0])
        except np.linalg.LinAlgError:
            kl = None
    return EvalSummary(
        diversity=diversity(x) if len(x) > 1 and np.all(np.linalg.norm(x, axis=1) > 0) else 0.0,
        diversity_offset=diversity(shift) if len(x) > 1 else 0.0,
        residual_rms=residual_rms(prob, x),
        coverage=cov,
        fractions=fr.tolist(),
        energy_distance=energy_distance(x, ref),
        gaussian_kl=kl,
    )
