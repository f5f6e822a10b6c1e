"""Time-indexed score oracles.

All oracles take a batch of points ``x`` with shape ``(n, d)`` and either one
time or one time per row. ``score`` returns ``(n, d)``; oracles that can
differentiate their output in ``x`` also provide ``jacobian`` (``(n, d, d)``)
and ``vjp`` (vector-Jacobian product, ``(n, d)``).
"""

from __future__ import annotations

import numpy as np
from scipy.special import softmax

from ppmlab.diffusion import VpSchedule, _per_row
from ppmlab.problems import GaussianMixture


class CapabilityError(TypeError):
    """The oracle cannot provide the requested derivative."""


class ScoreOracle:
    """Base class. Subclasses implement ``score`` and optionally ``jacobian``."""

    def __init__(self, schedule: VpSchedule):
        self.schedule = schedule
        self.jacobian_calls = 0

    def score(self, x, t):
        raise NotImplementedError

    def jacobian(self, x, t):
        raise CapabilityError(f"{type(self).__name__} does not provide a Jacobian")

    def vjp(self, x, t, v):
        """``J(x, t)^T v`` row-wise."""
        return np.einsum("nij,ni->nj", self.jacobian(x, t), np.asarray(v, dtype=float))

    def _prep(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x, _per_row(t, x.shape[0])


class AnalyticMixtureScore(ScoreOracle):
    """Exact score of a Gaussian mixture diffused by the VP forward process."""

    def __init__(self, mixture: GaussianMixture, schedule: VpSchedule):
        super().__init__(schedule)
        self.mixture = mixture

    def _components(self, x, t):
        g = self.mixture
        a, sg = self.schedule.alpha_sigma(t)
        eye = np.eye(g.dim)
        if np.all(t == t[0]):
            cov = a[0] ** 2 * g.covs + sg[0] ** 2 * eye
            prec = np.linalg.inv(cov)[None]
            logdet = np.linalg.slogdet(cov)[1][None]
        else:
            cov = a[:, None, None, None] ** 2 * g.covs[None] + sg[:, None, None, None] ** 2 * eye
            prec = np.linalg.inv(cov)
            logdet = np.linalg.slogdet(cov)[1]
        diff = x[:, None, :] - a[:, None, None] * g.means[None]
        comp = -np.einsum("nkij,nkj->nki", np.broadcast_to(prec, diff.shape + (g.dim,)), diff)
        with np.errstate(divide="ignore"):
            logits = np.log(g.weights)[None] + 0.5 * np.einsum("nki,nki->nk", diff, comp) - 0.5 * logdet
        return softmax(logits, axis=1), comp, prec

    def score(self, x, t):
        x, t = self._prep(x, t)
        r, comp, _ = self._components(x, t)
        return np.einsum("nk,nki->ni", r, comp)

    def jacobian(self, x, t):
        self.jacobian_calls += 1
        x, t = self._prep(x, t)
        r, comp, prec = self._components(x, t)
        mean = np.einsum("nk,nki->ni", r, comp)
        hess = -np.einsum("nk,nkij->nij", r, np.broadcast_to(prec, r.shape + prec.shape[-2:]))
        hess += np.einsum("nk,nki,nkj->nij", r, comp, comp) - np.einsum("ni,nj->nij", mean, mean)
        return 0.5 * (hess + np.swapaxes(hess, 1, 2))


class ParticleMarginalScore(ScoreOracle):
    """Score of the diffused particle ensemble ``(1/K) sum_k N(alpha mu_k, (alpha^2 c^2 + sigma^2) I)``.

    ``scale`` (``c``) is the width of each particle's Gaussian; 0 gives point masses.
    """

    def __init__(self, particles, schedule: VpSchedule, scale: float = 0.0):
        super().__init__(schedule)
        self.particles = np.array(np.atleast_2d(particles), dtype=float)
        self.scale = float(scale)

    def _resp(self, x, t):
        a, sg = self.schedule.alpha_sigma(t)
        var = a**2 * self.scale**2 + sg**2
        diff = x[:, None, :] - a[:, None, None] * self.particles[None]
        r = softmax(-0.5 * (diff**2).sum(-1) / var[:, None], axis=1)
        return r, a, var

    def score(self, x, t):
        x, t = self._prep(x, t)
        r, a, var = self._resp(x, t)
        return -(x - a[:, None] * (r @ self.particles)) / var[:, None]

    def jacobian(self, x, t):
        self.jacobian_calls += 1
        x, t = self._prep(x, t)
        r, a, var = self._resp(x, t)
        mbar = r @ self.particles
        second = np.einsum("nk,ki,kj->nij", r, self.particles, self.particles)
        cov = second - np.einsum("ni,nj->nij", mbar, mbar)
        d = x.shape[1]
        return -np.eye(d)[None] / var[:, None, None] + (a**2 / var**2)[:, None, None] * cov

    def vjp(self, x, t, v):
        x, t = self._prep(x, t)
        v = np.asarray(v, dtype=float)
        r, a, var = self._resp(x, t)
        # Cov_r(mu) v without forming d x d matrices
        proj = v @ self.particles.T
        mbar = r @ self.particles
        cov_v = (r * proj) @ self.particles - mbar * (r * proj).sum(1, keepdims=True)
        return -v / var[:, None] + (a**2 / var**2)[:, None] * cov_v


class PointMassScore(ScoreOracle):
    """Row-wise single-Gaussian score: row ``i`` is diffused from its own centre ``c_i``."""

    def __init__(self, centers, schedule: VpSchedule, scale: float = 0.0):
        super().__init__(schedule)
        self.centers = np.array(np.atleast_2d(centers), dtype=float)
        self.scale = float(scale)

    def _var(self, t):
        a, sg = self.schedule.alpha_sigma(t)
        return a, a**2 * self.scale**2 + sg**2

    def score(self, x, t):
        x, t = self._prep(x, t)
        a, var = self._var(t)
        return -(x - a[:, None] * self.centers) / var[:, None]

    def jacobian(self, x, t):
        self.jacobian_calls += 1
        x, t = self._prep(x, t)
        _, var = self._var(t)
        return -np.eye(x.shape[1])[None] / var[:, None, None]

    def vjp(self, x, t, v):
        x, t = self._prep(x, t)
        _, var = self._var(t)
        return -np.asarray(v, dtype=float) / var[:, None]


def mixture_score(g: GaussianMixture, s: VpSchedule, x, t):
    single = np.ndim(x) == 1
    out = AnalyticMixtureScore(g, s).score(x, t)
    return out[0] if single else out


def mixture_score_jacobian(g: GaussianMixture, s: VpSchedule, x, t):
    single = np.ndim(x) == 1
    out = AnalyticMixtureScore(g, s).jacobian(x, t)
    return out[0] if single else out


def particle_marginal_score(particles, s: VpSchedule, x, t, scale: float = 0.0):
    single = np.ndim(x) == 1
    out = ParticleMarginalScore(particles, s, scale).score(x, t)
    return out[0] if single else out


def tweedie_denoise(sc: ScoreOracle, s: VpSchedule, x_t, t):
    """Posterior mean ``E[x0 | x_t] = (x_t + sigma_t^2 score) / alpha_t``."""
    single = np.ndim(x_t) == 1
    x, tt = sc._prep(x_t, t)
    a, sg = s.alpha_sigma(tt)
    if np.any(a < 1e-300):
        raise FloatingPointError("alpha_t underflows; Tweedie estimate undefined")
    out = (x + sg[:, None] ** 2 * sc.score(x, tt)) / a[:, None]
    return out[0] if single else out
