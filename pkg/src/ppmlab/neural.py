"""Small tanh MLP with hand-written reverse mode, Adam, and a learned score oracle."""

from __future__ import annotations

import numpy as np

from ppmlab.diffusion import VpSchedule
from ppmlab.scores import ScoreOracle

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda h: 1.0 - h**2),
}


class FeedForwardNet:
    """Affine layers with a smooth activation between them (none after the last).

    ``params`` is a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape ``(in, out)``.
    """

    def __init__(self, widths, activation="tanh", rng=None, params=None, out_scale=1.0):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = []
            for i, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                std = 1.0 / np.sqrt(n_in)
                if i == len(self.widths) - 2:
                    std *= out_scale
                params += [rng.normal(0.0, std, (n_in, n_out)), np.zeros(n_out)]
        self.params = [np.array(p, dtype=float) for p in params]
        for i, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if self.params[2 * i].shape != (n_in, n_out) or self.params[2 * i + 1].shape != (n_out,):
                raise ValueError(f"layer {i} parameter shapes do not match widths {self.widths}")

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def _run(self, x):
        act, _ = _ACTIVATIONS[self.activation]
        hs = [x]
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = hs[-1] @ self.params[2 * i] + self.params[2 * i + 1]
            hs.append(act(z) if i < n_layers - 1 else z)
        return hs

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet(self.widths, self.activation, params=[p.copy() for p in self.params])

    def to_record(self) -> dict:
        return {
            "widths": self.widths,
            "activation": self.activation,
            "shapes": [list(p.shape) for p in self.params],
            "values": np.concatenate([p.ravel() for p in self.params]).tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FeedForwardNet":
        flat = np.asarray(rec["values"], dtype=float)
        params, i = [], 0
        for shape in rec["shapes"]:
            size = int(np.prod(shape))
            params.append(flat[i : i + size].reshape(shape))
            i += size
        if i != flat.size:
            raise ValueError("flat parameter array does not match shape header")
        return cls(rec["widths"], rec["activation"], params=params)


def _check_input(net, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.in_dim:
        raise ValueError(f"input has width {x.shape[1]}, net expects {net.in_dim}")
    return x


def net_forward(net: FeedForwardNet, x):
    return net._run(_check_input(net, x))[-1]


def net_gradients(net: FeedForwardNet, x, upstream):
    """Gradients of ``sum <upstream, net(x)>`` w.r.t. all parameters and the input."""
    x = _check_input(net, x)
    upstream = np.asarray(upstream, dtype=float).reshape(x.shape[0], net.out_dim)
    _, dact = _ACTIVATIONS[net.activation]
    hs = net._run(x)
    grads = [None] * len(net.params)
    delta = upstream
    for i in reversed(range(len(net.params) // 2)):
        grads[2 * i] = hs[i].T @ delta
        grads[2 * i + 1] = delta.sum(0)
        delta = delta @ net.params[2 * i].T
        if i > 0:
            delta = delta * dact(hs[i])
    return grads, delta


class AdamState:
    """Bias-corrected Adam moments for a list of parameter arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = None
        self.v = None


def adam_step(state: AdamState, params, grads, lr=None):
    """Update ``params`` in place and return them."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameter shapes")
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g**2
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class LearnedScore(ScoreOracle):
    """Score network ``s(x, t)`` fed with ``[x, alpha_t, sigma_t, t]`` and, when
    ``cond_dim > 0``, a conditioning vector appended after the time features.

    Without ``base`` the net is a denoiser: ``s = (alpha_t D(x, t) - x) / sigma_t^2``.
    With a ``base`` oracle the net is a correction in noise units on top of it:
    ``s = s_base - N(x, t) / sigma_t``, so a zero-initialised last layer starts
    exactly at the base score and regions without training data stay there.
    """

    def __init__(self, net: FeedForwardNet, schedule: VpSchedule, dim: int, cond_dim: int = 0,
                 base: ScoreOracle | None = None):
        super().__init__(schedule)
        if net.in_dim != dim + 3 + cond_dim or net.out_dim != dim:
            raise ValueError(f"net widths {net.widths} incompatible with dim={dim}, cond_dim={cond_dim}")
        self.net = net
        self.dim = dim
        self.cond_dim = cond_dim
        self.base = base

    @classmethod
    def create(cls, dim, schedule, hidden=(64, 64, 64), rng=None, cond_dim=0, base=None):
        out_scale = 0.0 if base is not None else 1.0
        net = FeedForwardNet([dim + 3 + cond_dim, *hidden, dim], rng=rng, out_scale=out_scale)
        return cls(net, schedule, dim, cond_dim, base)

    def features(self, x, t, cond=None):
        x, t = self._prep(x, t)
        a, sg = self.schedule.alpha_sigma(t)
        cols = [x, a[:, None], sg[:, None], t[:, None]]
        if self.cond_dim:
            if cond is None:
                raise ValueError("this score network needs a conditioning input")
            cols.append(np.broadcast_to(np.atleast_2d(cond), (x.shape[0], self.cond_dim)))
        return np.hstack(cols), a, sg

    def evaluate(self, x, t, cond=None):
        """``(score, features, coef)`` where ``coef`` is the per-row ``d score / d net output``."""
        feats, a, sg = self.features(x, t, cond)
        x = feats[:, : self.dim]
        out = net_forward(self.net, feats)
        if self.base is None:
            coef = a / sg**2
            return coef[:, None] * out - x / sg[:, None] ** 2, feats, coef
        coef = -1.0 / sg
        return self.base.score(x, feats[:, self.dim + 2]) + coef[:, None] * out, feats, coef

    def score(self, x, t, cond=None):
        return self.evaluate(x, t, cond)[0]

    def denoise(self, x, t, cond=None):
        x, t = self._prep(x, t)
        a, sg = self.schedule.alpha_sigma(t)
        return (x + sg[:, None] ** 2 * self.score(x, t, cond)) / a[:, None]

    def eps_prediction(self, x, t, cond=None):
        _, t = self._prep(x, t)
        return -self.schedule.sigma(t)[:, None] * self.score(x, t, cond)

    def vjp(self, x, t, v, cond=None):
        self.jacobian_calls += 1
        _, feats, coef = self.evaluate(x, t, cond)
        x, tt = feats[:, : self.dim], feats[:, self.dim + 2]
        v = np.asarray(v, dtype=float)
        _, gin = net_gradients(self.net, feats, v * coef[:, None])
        if self.base is None:
            return gin[:, : self.dim] - v / self.schedule.sigma(tt)[:, None] ** 2
        return gin[:, : self.dim] + self.base.vjp(x, tt, v)

    def jacobian(self, x, t, cond=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eye = np.eye(self.dim)
        # rows of J^T e_j give the j-th row of J
        rows = [self.vjp(x, t, np.broadcast_to(eye[j], x.shape), cond) for j in range(self.dim)]
        self.jacobian_calls -= self.dim - 1
        return np.stack(rows, axis=1)


class Conditioned(ScoreOracle):
    """Binds a per-row conditioning array to a conditional score network."""

    def __init__(self, inner: LearnedScore, cond):
        super().__init__(inner.schedule)
        self.inner = inner
        self.cond = cond

    def score(self, x, t):
        return self.inner.score(x, t, self.cond)

    def vjp(self, x, t, v):
        self.jacobian_calls += 1
        return self.inner.vjp(x, t, v, self.cond)

    def jacobian(self, x, t):
        self.jacobian_calls += 1
        return self.inner.jacobian(x, t, self.cond)


def sigma2_weight(schedule: VpSchedule):
    return lambda t: schedule.sigma(t) ** 2


def dsm_train_step(
    aux: LearnedScore,
    opt: AdamState,
    batch_x0,
    s: VpSchedule,
    rng: np.random.Generator,
    weight=None,
    cond=None,
    lr=None,
) -> float:
    """One Adam step on ``mean lambda(t) ||s(x_t, t) - grad log p(x_t | x0)||^2``.

    ``weight`` is ``lambda(t)``; the default is ``sigma_t^2``. Returns the loss
    before the update.
    """
    x0 = np.atleast_2d(np.asarray(batch_x0, dtype=float))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = rng.uniform(s.t_min, s.t_max, size=n)
    eps = rng.standard_normal(x0.shape)
    a, sg = s.alpha_sigma(t)
    x_t = a[:, None] * x0 + sg[:, None] * eps
    lam = sg**2 if weight is None else np.asarray(weight(t), dtype=float)
    score, feats, coef = aux.evaluate(x_t, t, cond)
    resid = score + eps / sg[:, None]
    loss = float(np.mean(lam * (resid**2).sum(1)))
    upstream = (2.0 / n) * (lam * coef)[:, None] * resid
    grads, _ = net_gradients(aux.net, feats, upstream)
    adam_step(opt, aux.net.params, grads, lr)
    return loss


def pretrain_score(aux: LearnedScore, sampler, s, rng, steps=2000, batch=256, lr=2e-3):
    """Fit ``aux`` by DSM to samples from ``sampler(rng, n)``; returns the loss trace."""
    opt = AdamState(lr=lr)
    return [dsm_train_step(aux, opt, sampler(rng, batch), s, rng) for _ in range(steps)]
