"""Posterior matching through the integrated Fisher divergence.

The prior term of the objective is ``KL(q || p) = int g(t)^2/2 E d(s_q - s_p) dt``.
Its gradient is estimated with the stop-gradient surrogate

    L = -d'(u)^T (s_aux(x_t) - grad log p(x_t | x0)) + d(u),   u = s_aux(x_t) - s_prior(x_t)

differentiated in ``x0`` through ``x_t = alpha_t x0 + sigma_t eps`` while the
auxiliary's own parameters are held fixed. Particles (variational mode) or a
generator network (amortized mode) are updated with Adam on that gradient plus
the data-fidelity gradient.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ppmlab.diffusion import TimeWeight, VpSchedule, conditional_score
from ppmlab.metrics import diversity
from ppmlab.neural import (
    AdamState,
    Conditioned,
    FeedForwardNet,
    LearnedScore,
    adam_step,
    dsm_train_step,
    net_forward,
    net_gradients,
)
from ppmlab.problems import GaussianMixture, LinearGaussianProblem, gmm_sample
from ppmlab.scores import AnalyticMixtureScore, CapabilityError, ParticleMarginalScore, PointMassScore

DIVERGENCE_NORM = 1e6
DEFAULT_T_LO = 0.02


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metric functions d(.)


@dataclass(frozen=True)
class MetricFn:
    """Convex ``d`` with ``d(0) = 0``: value, gradient and Hessian-vector product."""

    name: str = "l2"
    scale: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.name not in ("l2", "pseudo_huber"):
            raise ValueError(f"unknown metric {self.name!r}")
        if self.scale <= 0 or self.delta <= 0:
            raise ValueError("metric scale and delta must be positive")

    def value(self, u):
        u = np.asarray(u, dtype=float)
        sq = (u**2).sum(-1)
        if self.name == "l2":
            return self.scale * sq
        return self.scale * self.delta**2 * (np.sqrt(1.0 + sq / self.delta**2) - 1.0)

    def grad(self, u):
        u = np.asarray(u, dtype=float)
        if self.name == "l2":
            return 2.0 * self.scale * u
        root = np.sqrt(1.0 + (u**2).sum(-1, keepdims=True) / self.delta**2)
        return self.scale * u / root

    def hvp(self, u, v):
        """Hessian of ``d`` at ``u`` applied to ``v`` (row-wise)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.name == "l2":
            return 2.0 * self.scale * v
        sq = (u**2).sum(-1, keepdims=True)
        root = np.sqrt(1.0 + sq / self.delta**2)
        uv = (u * v).sum(-1, keepdims=True)
        return self.scale * (v - u * uv / (self.delta**2 + sq)) / root


# ---------------------------------------------------------------------------
# configuration and records


@dataclass
class PpmConfig:
    lam: float = 1.0  # data weight; the data gradient is lam / (2 sigma_y^2) * grad ||y - F x||^2
    # below t ~ 0.01 the diffused point-mass ensemble is too spiky to give a usable entropy signal
    time_weight: TimeWeight = field(default_factory=lambda: TimeWeight(lo=DEFAULT_T_LO))
    include_g2: bool = True
    iterations: int = 1500
    lr: float = 0.03
    lr_final: float | None = 0.003
    aux_mode: str = "oracle"  # "oracle" (analytic) or "learned"
    aux_lr: float = 1e-3
    aux_steps: int = 1
    aux_batch: int = 256
    aux_init: str = "residual"  # "residual": prior score plus a zero-initialised correction; "pretrain": DSM on prior draws
    aux_pretrain_steps: int = 2000
    aux_warmup_steps: int = 500  # DSM steps on the initial particles before the first particle update
    aux_hidden: tuple = (64, 64, 64)
    metric: MetricFn = field(default_factory=MetricFn)
    K: int = 64
    n_draws: int = 4
    seed: int = 0
    init_jitter: float = 0.5
    particle_scale: float = 0.0
    average_tail: float = 0.0
    # amortized mode
    h: float = 0.0
    batch_size: int = 64
    gen_hidden: tuple = (64, 64)
    gen_lr: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.aux_mode not in ("oracle", "learned"):
            raise ValueError(f"aux_mode must be 'oracle' or 'learned', got {self.aux_mode!r}")
        if self.aux_init not in ("residual", "pretrain"):
            raise ValueError(f"aux_init must be 'residual' or 'pretrain', got {self.aux_init!r}")
        if self.K < 1 or self.n_draws < 1:
            raise ValueError("K and n_draws must be >= 1")
        if self.h < 0:
            raise ValueError("h must be nonnegative")

    def to_dict(self) -> dict:
        out = asdict(self)
        tw = self.time_weight
        out["time_weight"] = {k: v for k, v in asdict(tw).items() if k != "fn" and v is not None}
        out["metric"] = asdict(self.metric)
        out["aux_hidden"] = list(self.aux_hidden)
        out["gen_hidden"] = list(self.gen_hidden)
        return out


@dataclass
class RunRecord:
    method: str
    config: dict
    seed: int
    scalars: dict
    particles: np.ndarray | None = None
    generator: dict | None = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(next(iter(self.scalars.values()))) if self.scalars else 0


def _rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))


def _lr_at(cfg_lr, lr_final, it, iters):
    if lr_final is None or iters <= 1:
        return cfg_lr
    return cfg_lr * (lr_final / cfg_lr) ** (it / (iters - 1))


def _guard(x, method, it):
    norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if not np.all(np.isfinite(norms)) or norms.max() > DIVERGENCE_NORM:
        raise DivergenceError(
            f"{method}: divergence at iteration {it} (max norm {norms.max():.3e} > {DIVERGENCE_NORM:.0e})"
        )


# ---------------------------------------------------------------------------
# gradients


def ppm_prior_grad(x0, aux, prior, s: VpSchedule, t, eps, metric: MetricFn | None = None,
                   weight=None, include_g2=True):
    """Per-row gradient of the prior surrogate w.r.t. ``x0``.

    Returns ``(grad, d_value)`` where ``d_value`` is the weighted ``d(u)`` per row
    (an estimate of the weighted Fisher integrand when ``aux`` is exact).
    ``weight`` multiplies each row (time weight times importance factor).
    """
    metric = MetricFn() if metric is None else metric
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x0.shape[0],))
    a, sg = s.alpha_sigma(t)
    if np.any(sg <= 0):
        raise ZeroDivisionError("sigma_t must be positive for every draw")
    x_t = a[:, None] * x0 + sg[:, None] * eps
    s_aux = aux.score(x_t, t)
    s_prior = prior.score(x_t, t)
    # along x_t = alpha x0 + sigma eps the kernel score is -eps/sigma; its x0- and
    # x_t-derivatives cancel, so it enters the gradient only through its value
    cond = conditional_score(s, x_t, x0, t)
    u = s_aux - s_prior
    r = s_aux - cond
    hr = metric.hvp(u, r)
    dprime = metric.grad(u)
    try:
        g_xt = -aux.vjp(x_t, t, hr) + prior.vjp(x_t, t, hr - dprime)
    except CapabilityError as exc:
        raise CapabilityError(f"ppm_prior_grad needs input gradients of both scores: {exc}") from exc
    w = np.ones_like(t) if weight is None else np.broadcast_to(np.asarray(weight, dtype=float), t.shape)
    if include_g2:
        w = w * 0.5 * s.g2(t)
    return (w * a)[:, None] * g_xt, w * metric.value(u)


def data_fidelity_grad(prob: LinearGaussianProblem, x0):
    """Gradient of ``||y - F x0||^2``: ``2 F^T (F x0 - y)``."""
    return -2.0 * prob.operator.adjoint(prob.residual(x0))


def init_particles(prob: LinearGaussianProblem, K: int, jitter: float, rng):
    """Pseudo-inverse of the measurement plus isotropic Gaussian jitter."""
    x_init = np.linalg.pinv(prob.operator.to_dense()) @ prob.y
    return x_init[None, :] + jitter * rng.standard_normal((K, x_init.size))


def _residual_rms(prob, x):
    return float(np.sqrt(np.mean((prob.residual(x) ** 2).sum(-1))))


# ---------------------------------------------------------------------------
# variational (particle) mode


def optimize_particles(cfg: PpmConfig, prob, prior_grad_rule, particles, rng, method):
    """Adam loop shared by the particle methods.

    ``prior_grad_rule(mu, rng, it)`` returns ``(grad, prior_loss_estimate)``.
    """
    start = time.perf_counter()
    mu = np.array(particles, dtype=float)
    opt = AdamState(lr=cfg.lr)
    lam_eff = cfg.lam / (2 * prob.sigma_y**2)
    scalars = {"residual_rms": [], "prior_loss": [], "diversity": []}
    tail_start = int(cfg.iterations * (1 - cfg.average_tail)) if cfg.average_tail > 0 else None
    tail_sum, tail_n = np.zeros_like(mu), 0
    for it in range(cfg.iterations):
        g_prior, prior_loss = prior_grad_rule(mu, rng, it)
        grad = g_prior + lam_eff * data_fidelity_grad(prob, mu)
        adam_step(opt, [mu], [grad], _lr_at(cfg.lr, cfg.lr_final, it, cfg.iterations))
        _guard(mu, method, it)
        scalars["residual_rms"].append(_residual_rms(prob, mu))
        scalars["prior_loss"].append(float(prior_loss))
        scalars["diversity"].append(diversity(mu) if mu.shape[0] > 1 else 0.0)
        if tail_start is not None and it >= tail_start:
            tail_sum += mu
            tail_n += 1
    extra = {}
    if tail_n:
        # Polyak averaging of the final iterates; the last iterate is kept for reference
        extra["last_iterate"] = mu
        mu = tail_sum / tail_n
    return RunRecord(method, cfg.to_dict(), cfg.seed, scalars, particles=mu,
                     wall_time=time.perf_counter() - start, extra=extra)


def make_learned_aux(cfg, prior_mix: GaussianMixture, s: VpSchedule, rng, prior=None, cond_dim=0,
                     cond_sampler=None):
    """Auxiliary score network that starts at the prior score.

    With ``aux_init="residual"`` the network is a correction on top of the prior
    oracle, so it equals the prior exactly at initialisation and stays there away
    from the particles. With ``"pretrain"`` a standalone network is fitted by DSM
    on prior draws.
    """
    if cfg.aux_init == "residual":
        base = AnalyticMixtureScore(prior_mix, s) if prior is None else prior
        return LearnedScore.create(prior_mix.dim, s, cfg.aux_hidden, rng=rng, cond_dim=cond_dim, base=base)
    aux = LearnedScore.create(prior_mix.dim, s, cfg.aux_hidden, rng=rng, cond_dim=cond_dim)
    opt = AdamState(lr=2e-3)
    for _ in range(cfg.aux_pretrain_steps):
        x0 = gmm_sample(prior_mix, rng, cfg.aux_batch)
        cond = None if cond_sampler is None else cond_sampler(rng, cfg.aux_batch)
        dsm_train_step(aux, opt, x0, s, rng, cond=cond)
    return aux


class ParticleAuxFit:
    """DSM updates of a learned auxiliary on the current particle set."""

    def __init__(self, cfg, aux: LearnedScore, s: VpSchedule):
        self.cfg = cfg
        self.aux = aux
        self.s = s
        self.opt = AdamState(lr=cfg.aux_lr)

    def fit(self, mu, rng, steps):
        cfg = self.cfg
        K, d = mu.shape
        for _ in range(steps):
            # stratified: every particle appears equally often, so lone particles are not underfit
            idx = rng.permutation(np.resize(np.arange(K), cfg.aux_batch))
            batch = mu[idx] + cfg.particle_scale * rng.standard_normal((cfg.aux_batch, d))
            dsm_train_step(self.aux, self.opt, batch, self.s, rng)


def _draw(cfg, s, rng, n, d):
    t, factor = cfg.time_weight.sample(s, rng, n)
    eps = rng.standard_normal((n, d))
    return t, factor, eps


def run_ppm_vi(cfg: PpmConfig, prob: LinearGaussianProblem, prior_mix: GaussianMixture, s: VpSchedule,
               prior_oracle=None) -> RunRecord:
    """Particle-mode posterior matching for one observation."""
    rng = _rng(cfg.seed)
    prior = AnalyticMixtureScore(prior_mix, s) if prior_oracle is None else prior_oracle
    particles = init_particles(prob, cfg.K, cfg.init_jitter, rng)
    K, d = particles.shape
    B = cfg.n_draws
    aux_fit = None
    if cfg.aux_mode == "learned":
        aux_fit = ParticleAuxFit(cfg, make_learned_aux(cfg, prior_mix, s, rng, prior), s)
        aux_fit.fit(particles, rng, cfg.aux_warmup_steps)

    def rule(mu, rng, it):
        if aux_fit is not None:
            aux = aux_fit.aux
            aux_fit.fit(mu, rng, cfg.aux_steps)
        else:
            aux = ParticleMarginalScore(mu.copy(), s, cfg.particle_scale)
        x0 = np.repeat(mu, B, axis=0)
        if cfg.particle_scale:
            x0 = x0 + cfg.particle_scale * rng.standard_normal(x0.shape)
        t, factor, eps = _draw(cfg, s, rng, K * B, d)
        g, dval = ppm_prior_grad(x0, aux, prior, s, t, eps, cfg.metric, factor, cfg.include_g2)
        return g.reshape(K, B, d).mean(1), dval.mean()

    rec = optimize_particles(cfg, prob, rule, particles, rng, "ppm-vi")
    if aux_fit is not None:
        rec.extra["aux"] = aux_fit.aux.net.to_record()
    return rec


# ---------------------------------------------------------------------------
# amortized mode


def generate(gen: FeedForwardNet, y, h: float = 0.0, rng=None):
    """Generator output for observations ``y`` (rows), with input noise of variance ``h``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if h > 0:
        y = y + np.sqrt(h) * rng.standard_normal(y.shape)
    return net_forward(gen, y)


def train_generator(cfg: PpmConfig, dataset, prior_mix, s, prior_grad_fn, method, prior_oracle=None):
    """Alternating auxiliary / generator loop shared by the amortized methods.

    ``prior_grad_fn(x0, aux, prior, t, eps, factor)`` returns ``(grad, est)``.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    op = dataset[0].operator
    if any(p.operator is not op for p in dataset) and any(
        not np.array_equal(p.operator.to_dense(), op.to_dense()) for p in dataset
    ):
        raise ValueError("all problems in the dataset must share one operator")
    sigma_y = dataset[0].sigma_y
    start = time.perf_counter()
    rng = _rng(cfg.seed)
    prior = AnalyticMixtureScore(prior_mix, s) if prior_oracle is None else prior_oracle
    Y = np.stack([p.y for p in dataset])
    m, d = Y.shape[1], prior_mix.dim
    gen = FeedForwardNet([m, *cfg.gen_hidden, d], rng=rng)
    opt = AdamState(lr=cfg.gen_lr)
    lam_eff = cfg.lam / (2 * sigma_y**2)
    aux = aux_opt = None
    if cfg.aux_mode == "learned":
        aux = make_learned_aux(cfg, prior_mix, s, rng, prior, cond_dim=m,
                               cond_sampler=lambda r, n: Y[r.integers(0, len(Y), n)])
        aux_opt = AdamState(lr=cfg.aux_lr)
    scalars = {"residual_rms": [], "prior_loss": [], "diversity": []}
    n = cfg.batch_size
    for it in range(cfg.iterations):
        y = Y[rng.integers(0, len(Y), n)]
        yp = y + np.sqrt(cfg.h) * rng.standard_normal(y.shape) if cfg.h > 0 else y
        x0 = net_forward(gen, yp)
        if aux is not None:
            for _ in range(cfg.aux_steps):
                dsm_train_step(aux, aux_opt, x0, s, rng, cond=yp)
            aux_now = Conditioned(aux, np.repeat(yp, cfg.n_draws, axis=0))
        else:
            aux_now = PointMassScore(np.repeat(x0, cfg.n_draws, axis=0), s)
        x0r = np.repeat(x0, cfg.n_draws, axis=0)
        t, factor, eps = _draw(cfg, s, rng, n * cfg.n_draws, d)
        g, est = prior_grad_fn(x0r, aux_now, prior, t, eps, factor)
        g_x0 = g.reshape(n, cfg.n_draws, d).mean(1)
        resid = y - op.apply(x0)
        g_x0 = g_x0 - 2.0 * lam_eff * op.adjoint(resid)
        grads, _ = net_gradients(gen, yp, g_x0 / n)
        gen_final = None if cfg.lr_final is None else cfg.gen_lr * cfg.lr_final / cfg.lr
        adam_step(opt, gen.params, grads, _lr_at(cfg.gen_lr, gen_final, it, cfg.iterations))
        _guard(np.concatenate([p.ravel() for p in gen.params]), method, it)
        scalars["residual_rms"].append(float(np.sqrt(np.mean((resid**2).sum(-1)))))
        scalars["prior_loss"].append(float(np.mean(est)))
        scalars["diversity"].append(0.0)
    rec = RunRecord(method, cfg.to_dict(), cfg.seed, scalars, generator=gen.to_record(),
                    wall_time=time.perf_counter() - start)
    return gen, rec


def run_ppm_amortized(cfg: PpmConfig, dataset, prior_mix: GaussianMixture, s: VpSchedule, prior_oracle=None):
    """Train a generator ``y' -> x0`` with the posterior-matching gradient."""

    def grad_fn(x0, aux, prior, t, eps, factor):
        return ppm_prior_grad(x0, aux, prior, s, t, eps, cfg.metric, factor, cfg.include_g2)

    return train_generator(cfg, dataset, prior_mix, s, grad_fn, "ppm-ai", prior_oracle)


__all__ = [
    "DivergenceError",
    "MetricFn",
    "PpmConfig",
    "RunRecord",
    "data_fidelity_grad",
    "generate",
    "init_particles",
    "optimize_particles",
    "ppm_prior_grad",
    "run_ppm_amortized",
    "run_ppm_vi",
    "train_generator",
]
