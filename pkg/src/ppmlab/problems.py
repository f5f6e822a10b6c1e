"""Gaussian-mixture priors, linear-Gaussian forward models and exact posteriors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ppmlab.diffusion import VpSchedule

EIG_FLOOR = 1e-10
LOG_2PI = np.log(2 * np.pi)


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != d:
        raise ValueError(f"points have dimension {x.shape[-1]}, expected {d}")
    return x, single


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m[:, None] if w.size > 1 else m[None, :]
        c = np.asarray(self.covs, dtype=float)
        k, d = m.shape
        if c.ndim == 0:
            c = np.broadcast_to(c * np.eye(d), (k, d, d))
        elif c.ndim == 1:
            # one isotropic variance per component
            c = c[:, None, None] * np.eye(d)
        elif c.ndim == 2:
            c = np.broadcast_to(c, (k, d, d))
        c = np.array(c)
        if w.shape != (k,) or c.shape != (k, d, d):
            raise ValueError(f"inconsistent shapes: weights {w.shape}, means {m.shape}, covs {c.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be a probability vector, got {w}")
        if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(c) <= 0):
            raise ValueError("covariances must be positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim < 2:
            cov = cov * np.eye(mean.size)
        return cls(np.ones(1), mean[None, :], cov[None])

    def component_log_pdf(self, x) -> np.ndarray:
        """Per-component log densities, shape ``(n, k)``."""
        x, _ = _as_points(x, self.dim)
        chol = np.linalg.cholesky(self.covs)
        diff = x[:, None, :] - self.means[None]
        z = np.linalg.solve(chol[None], diff[..., None])[..., 0]
        logdet = 2 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1)
        return -0.5 * ((z**2).sum(-1) + logdet[None] + self.dim * LOG_2PI)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covs.tolist(),
        }


def gmm_log_density(g: GaussianMixture, x):
    """``log sum_i w_i N(x; m_i, S_i)`` via log-sum-exp. Scalar for a single point."""
    _, single = _as_points(x, g.dim)
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    out = logsumexp(g.component_log_pdf(x) + logw[None], axis=1)
    return out[0] if single else out


def gmm_sample(g: GaussianMixture, rng: np.random.Generator, n: int | None = None):
    """Ancestral samples; a single point when ``n`` is None."""
    size = 1 if n is None else n
    comp = rng.choice(g.n_components, size=size, p=g.weights)
    chol = np.linalg.cholesky(g.covs)
    z = rng.standard_normal((size, g.dim))
    x = g.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)
    return x[0] if n is None else x


def diffuse_gmm(g: GaussianMixture, s: VpSchedule, t: float) -> GaussianMixture:
    """Exact marginal of the forward process at time ``t``."""
    a, sg = s.alpha_sigma(t)
    return GaussianMixture(g.weights, a * g.means, a**2 * g.covs + sg**2 * np.eye(g.dim))


class LinearOperator:
    """Linear forward map stored as a dense matrix, a coordinate mask or a DFT row mask.

    The DFT mask keeps the selected rows of the orthonormal DFT and stacks their
    real and imaginary parts, so the output is real with ``2 * len(rows)`` entries.
    """

    def __init__(self, kind: str, input_dim: int, matrix=None, indices=None):
        self.kind = kind
        self.input_dim = int(input_dim)
        if kind == "dense":
            self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
            if self.matrix.shape[1] != self.input_dim:
                raise ValueError(f"matrix has {self.matrix.shape[1]} columns, expected {self.input_dim}")
            self.indices = None
        elif kind in ("mask", "dft_mask"):
            idx = np.asarray(indices, dtype=int)
            if idx.ndim != 1 or np.any(idx < 0) or np.any(idx >= self.input_dim):
                raise ValueError(f"bad indices {indices} for input_dim {self.input_dim}")
            self.indices = idx
            self.matrix = None
        else:
            raise ValueError(f"unknown operator kind {kind!r}")
        self._dense = self._materialize()

    @classmethod
    def dense(cls, matrix) -> "LinearOperator":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls("dense", matrix.shape[1], matrix=matrix)

    @classmethod
    def mask(cls, input_dim, indices) -> "LinearOperator":
        return cls("mask", input_dim, indices=indices)

    @classmethod
    def dft_mask(cls, input_dim, rows) -> "LinearOperator":
        return cls("dft_mask", input_dim, indices=rows)

    def _materialize(self):
        d = self.input_dim
        if self.kind == "dense":
            return self.matrix
        if self.kind == "mask":
            return np.eye(d)[self.indices]
        k = np.arange(d)
        w = np.exp(-2j * np.pi * np.outer(self.indices, k) / d) / np.sqrt(d)
        return np.vstack([w.real, w.imag])

    @property
    def output_dim(self) -> int:
        return self._dense.shape[0]

    def to_dense(self) -> np.ndarray:
        return self._dense.copy()

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "mask":
            return x[..., self.indices]
        if self.kind == "dft_mask":
            f = np.fft.fft(x, axis=-1, norm="ortho")[..., self.indices]
            return np.concatenate([f.real, f.imag], axis=-1)
        return x @ self.matrix.T

    def adjoint(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "mask":
            out = np.zeros(v.shape[:-1] + (self.input_dim,))
            out[..., self.indices] = v
            return out
        return v @ self._dense

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "input_dim": self.input_dim}
        if self.kind == "dense":
            out["matrix"] = self.matrix.tolist()
        else:
            out["indices"] = self.indices.tolist()
        return out


@dataclass(frozen=True, eq=False)
class LinearGaussianProblem:
    operator: LinearOperator
    y: np.ndarray
    sigma_y: float
    # evaluation only; solvers never read it
    x_true: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.sigma_y <= 0:
            raise ValueError(f"sigma_y must be positive, got {self.sigma_y}")
        if y.shape != (self.operator.output_dim,):
            raise ValueError(f"y has shape {y.shape}, operator output_dim is {self.operator.output_dim}")
        object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.operator.input_dim

    def residual(self, x):
        return self.y - self.operator.apply(x)

    def log_likelihood(self, x):
        r = self.residual(x)
        m = self.y.size
        return -0.5 * (r**2).sum(-1) / self.sigma_y**2 - 0.5 * m * (LOG_2PI + 2 * np.log(self.sigma_y))

    def likelihood_score(self, x):
        """Gradient of ``log p(y | x)`` in ``x``."""
        return self.operator.adjoint(self.residual(x)) / self.sigma_y**2


def _spd_inverse(c, what):
    c = 0.5 * (c + c.T)
    evals, evecs = np.linalg.eigh(c)
    if evals.min() <= EIG_FLOOR * max(evals.max(), 1.0):
        cond = evals.max() / max(evals.min(), np.finfo(float).tiny)
        raise SingularCovarianceError(f"{what} is numerically singular (condition number {cond:.3e})")
    return (evecs / evals) @ evecs.T


def _spd_floor(c):
    c = 0.5 * (c + c.T)
    evals, evecs = np.linalg.eigh(c)
    return (evecs * np.maximum(evals, EIG_FLOOR)) @ evecs.T


def analytic_posterior(g: GaussianMixture, prob: LinearGaussianProblem) -> GaussianMixture:
    """Exact posterior mixture by a per-component conjugate update."""
    F = prob.operator.to_dense()
    s2 = prob.sigma_y**2
    y = prob.y
    means, covs, logw = [], [], []
    for w, m, c in zip(g.weights, g.means, g.covs):
        prec = _spd_inverse(c, "prior covariance")
        post_cov = _spd_floor(np.linalg.inv(prec + F.T @ F / s2))
        means.append(post_cov @ (prec @ m + F.T @ y / s2))
        covs.append(post_cov)
        pred = GaussianMixture.gaussian(F @ m, F @ c @ F.T + s2 * np.eye(y.size))
        with np.errstate(divide="ignore"):
            logw.append(np.log(w) + pred.component_log_pdf(y)[0, 0])
    logw = np.array(logw)
    w = np.exp(logw - logsumexp(logw))
    return GaussianMixture(w / w.sum(), np.array(means), np.array(covs))


def simulate_observation(
    g: GaussianMixture, op: LinearOperator, sigma_y: float, rng: np.random.Generator
) -> LinearGaussianProblem:
    if sigma_y <= 0:
        raise ValueError(f"sigma_y must be positive, got {sigma_y}")
    x_true = gmm_sample(g, rng)
    y = op.apply(x_true) + sigma_y * rng.standard_normal(op.output_dim)
    return LinearGaussianProblem(op, y, sigma_y, x_true=x_true)
