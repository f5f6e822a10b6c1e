"""Variance-preserving diffusion schedule and its perturbation kernel.

Times are continuous in ``[0, t_max]``. Every function here accepts either a
scalar time or one time per row of a batch of points with shape ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when a time lies outside the schedule's domain."""


@dataclass(frozen=True)
class VpSchedule:
    """Linear-beta VP schedule: ``g(t)^2 = beta(t) = beta_min + t (beta_max - beta_min)``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    t_max: float = 1.0

    def __post_init__(self):
        # beta_min = beta_max = 0 is allowed as the degenerate alpha == 1 schedule
        if self.beta_min < 0 or self.beta_max < self.beta_min:
            raise ValueError(f"need 0 <= beta_min <= beta_max, got {self.beta_min}, {self.beta_max}")
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.t_max * (1 + 1e-12)):
            raise DomainError(f"t must lie in [0, {self.t_max}]")
        return t

    def beta(self, t):
        t = self._check(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    g2 = beta

    def int_beta(self, t):
        t = self._check(t)
        return self.beta_min * t + 0.5 * t**2 * (self.beta_max - self.beta_min)

    def alpha(self, t):
        return np.exp(-0.5 * self.int_beta(t))

    def sigma(self, t):
        return np.sqrt(-np.expm1(-self.int_beta(t)))

    def alpha_sigma(self, t):
        ib = self.int_beta(t)
        return np.exp(-0.5 * ib), np.sqrt(-np.expm1(-ib))


def alpha_sigma(s: VpSchedule, t):
    """Return ``(alpha_t, sigma_t)`` with ``alpha_t^2 + sigma_t^2 = 1``."""
    return s.alpha_sigma(t)


def _per_row(t, n):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full(n, float(t))
    if t.shape != (n,):
        raise ValueError(f"expected {n} times, got shape {t.shape}")
    return t


def perturb(s: VpSchedule, x0, t, eps):
    """``x_t = alpha_t x0 + sigma_t eps`` (row-wise for batched inputs)."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    if x0.ndim == 1:
        a, sg = s.alpha_sigma(t)
        return a * x0 + sg * eps
    a, sg = s.alpha_sigma(_per_row(t, x0.shape[0]))
    return a[:, None] * x0 + sg[:, None] * eps


def conditional_score(s: VpSchedule, x_t, x0, t):
    """Score of the perturbation kernel, ``-(x_t - alpha_t x0) / sigma_t^2``."""
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_t.shape != x0.shape:
        raise ValueError(f"x_t shape {x_t.shape} does not match x0 shape {x0.shape}")
    if x_t.ndim == 1:
        a, sg = s.alpha_sigma(t)
    else:
        a, sg = s.alpha_sigma(_per_row(t, x_t.shape[0]))
        a, sg = a[:, None], sg[:, None]
    if np.any(np.asarray(sg) == 0):
        raise ZeroDivisionError("sigma_t = 0: conditional score undefined (use t >= t_min)")
    return -(x_t - a * x0) / sg**2


def sample_time(s: VpSchedule, rng: np.random.Generator, size=None):
    """Uniform draw(s) on ``[t_min, t_max]``."""
    return rng.uniform(s.t_min, s.t_max, size=size)


@dataclass(frozen=True)
class TimeWeight:
    """A nonnegative weight over diffusion time, used as ``w(t)`` or ``omega_t``.

    Kinds: ``constant`` (``value`` on ``[lo, hi]``, default the whole schedule
    range), ``point_mass`` (mass ``value`` at time ``at``) and ``function``
    (``fn(t)`` on the schedule range).

    ``sample`` returns times together with importance factors so that
    ``mean(factor * h(t))`` is an unbiased estimate of ``int w(t) h(t) dt``.
    """

    kind: str = "constant"
    value: float = 1.0
    lo: float | None = None
    hi: float | None = None
    at: float | None = None
    fn: object = None

    def __post_init__(self):
        if self.kind not in ("constant", "point_mass", "function"):
            raise ValueError(f"unknown time-weight kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("time weights must be nonnegative")
        if self.kind == "point_mass" and self.at is None:
            raise ValueError("point_mass needs 'at'")
        if self.kind == "function" and not callable(self.fn):
            raise ValueError("function weight needs a callable 'fn'")

    def _range(self, s: VpSchedule):
        lo = s.t_min if self.lo is None else max(self.lo, s.t_min)
        hi = s.t_max if self.hi is None else min(self.hi, s.t_max)
        return lo, hi

    def __call__(self, t, s: VpSchedule | None = None):
        t = np.asarray(t, dtype=float)
        if self.kind == "function":
            return self.value * np.asarray(self.fn(t), dtype=float)
        if self.kind == "point_mass":
            raise TypeError("a point mass has no pointwise density")
        if self.lo is None and self.hi is None:
            return np.full(t.shape, self.value)
        lo = -np.inf if self.lo is None else self.lo
        hi = np.inf if self.hi is None else self.hi
        return np.where((t >= lo) & (t <= hi), self.value, 0.0)

    def sample(self, s: VpSchedule, rng: np.random.Generator, n: int):
        if self.kind == "point_mass":
            return np.full(n, float(self.at)), np.full(n, self.value)
        lo, hi = self._range(s)
        t = rng.uniform(lo, hi, size=n)
        if self.kind == "constant":
            return t, np.full(n, self.value * (hi - lo))
        return t, (hi - lo) * self(t)

    def integrate(self, f, s: VpSchedule, tol: float = 1e-10) -> float:
        """``int w(t) f(t) dt`` over the schedule range."""
        from ppmlab.quadrature import adaptive_simpson

        if self.kind == "point_mass":
            return float(self.value * f(self.at))
        lo, hi = self._range(s)
        if self.kind == "constant":
            return self.value * adaptive_simpson(lambda t: float(f(t)), lo, hi, tol / max(self.value, 1e-300))
        return adaptive_simpson(lambda t: float(self(t) * f(t)), lo, hi, tol)

    def scaled(self, c: float) -> "TimeWeight":
        return TimeWeight(self.kind, self.value * c, self.lo, self.hi, self.at, self.fn)
