import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppmlab.diffusion import VpSchedule, conditional_score
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
from ppmlab.problems import GaussianMixture
from ppmlab.scores import AnalyticMixtureScore, ParticleMarginalScore

TWO = np.array([[-1.0, 0.0], [1.0, 0.5]])


def reference_forward(params, x):
    h = x
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = np.tanh(h)
    return h


def test_zero_weights_give_final_bias():
    net = FeedForwardNet([3, 5, 2], rng=np.random.default_rng(0))
    for p in net.params:
        p[...] = 0.0
    net.params[-1][:] = [0.3, -1.2]
    assert np.array_equal(net_forward(net, np.ones((4, 3))), np.tile([0.3, -1.2], (4, 1)))


def test_final_layer_linearity(rng):
    net = FeedForwardNet([3, 6, 6, 2], rng=rng)
    net.params[-1][:] = rng.normal(size=2)
    x = rng.normal(size=(5, 3))
    before = net_forward(net, x) - net.params[-1]
    net.params[-2] *= 2.0
    assert np.allclose(net_forward(net, x) - net.params[-1], 2.0 * before, atol=1e-14)


def test_forward_matches_reference(rng):
    net = FeedForwardNet([4, 7, 5, 3], rng=rng)
    x = rng.normal(size=(9, 4))
    assert np.allclose(net_forward(net, x), reference_forward(net.params, x), atol=1e-12, rtol=0)


def test_parameter_count_and_errors(rng):
    net = FeedForwardNet([4, 7, 5, 3], rng=rng)
    assert net.n_params == (4 + 1) * 7 + (7 + 1) * 5 + (5 + 1) * 3
    with pytest.raises(ValueError):
        net_forward(net, np.ones((2, 3)))
    with pytest.raises(ValueError):
        FeedForwardNet([4])
    with pytest.raises(ValueError):
        FeedForwardNet([4, 2], activation="relu")


def test_record_roundtrip(rng):
    net = FeedForwardNet([3, 4, 2], rng=rng)
    back = FeedForwardNet.from_record(net.to_record())
    x = rng.normal(size=(3, 3))
    assert np.array_equal(net_forward(back, x), net_forward(net, x))
    rec = net.to_record()
    rec["values"] = rec["values"][:-1]
    with pytest.raises(ValueError):
        FeedForwardNet.from_record(rec)


def _fd_check(net, x, up, h=1e-6):
    grads, gin = net_gradients(net, x, up)
    f = lambda: float(np.sum(up * net_forward(net, x)))  # noqa: E731
    worst = 0.0
    for p, g in zip(net.params, grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - g)) / max(np.max(np.abs(fd)), 1e-8))
    fd_in = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        fd_in[idx] = (fp - fm) / (2 * h)
    worst = max(worst, np.max(np.abs(fd_in - gin)) / max(np.max(np.abs(fd_in)), 1e-8))
    return worst


def test_gradients_match_finite_differences_20_nets():
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(20):
        depth = rng.integers(1, 4)
        widths = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(depth)] + [int(rng.integers(1, 4))]
        net = FeedForwardNet(widths, rng=rng)
        x = rng.normal(size=(3, widths[0]))
        up = rng.normal(size=(3, widths[-1]))
        errs.append(_fd_check(net, x, up))
    assert max(errs) < 1e-5


def test_zero_upstream_and_linear_input_grad(rng):
    net = FeedForwardNet([3, 4, 2], rng=rng)
    grads, gin = net_gradients(net, rng.normal(size=(5, 3)), np.zeros((5, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(gin == 0)
    lin = FeedForwardNet([3, 2], rng=rng)
    up = rng.normal(size=(5, 2))
    _, gin = net_gradients(lin, rng.normal(size=(5, 3)), up)
    assert np.allclose(gin, up @ lin.params[0].T)


def test_adam_zero_grad_and_first_step(rng):
    p = [rng.normal(size=(3, 2))]
    p0 = p[0].copy()
    adam_step(AdamState(lr=0.1), p, [np.zeros((3, 2))])
    assert np.array_equal(p[0], p0)
    g = rng.normal(size=(3, 2))
    adam_step(AdamState(lr=0.1), p, [g])
    assert np.allclose(p[0] - p0, -0.1 * np.sign(g), atol=1e-6)
    with pytest.raises(ValueError):
        adam_step(AdamState(), p, [np.zeros((2, 2))])


def test_adam_deterministic(rng):
    g = rng.normal(size=4)
    a, b = [np.ones(4)], [np.ones(4)]
    sa, sb = AdamState(), AdamState()
    for _ in range(5):
        adam_step(sa, a, [g])
        adam_step(sb, b, [g])
    assert np.array_equal(a[0], b[0]) and sa.step == 5


@pytest.fixture
def sched():
    return VpSchedule()


def test_learned_score_conventions(sched, rng):
    aux = LearnedScore.create(2, sched, hidden=(8,), rng=rng)
    x, t = rng.normal(size=(6, 2)), rng.uniform(0.05, 1.0, 6)
    sc = aux.score(x, t)
    sg = sched.sigma(t)[:, None]
    assert np.allclose(aux.eps_prediction(x, t), -sg * sc)
    assert np.allclose(aux.denoise(x, t), (x + sg**2 * sc) / sched.alpha(t)[:, None])


def test_learned_score_vjp_and_jacobian(sched, rng):
    base = AnalyticMixtureScore(GaussianMixture([0.4, 0.6], [[-1.0, 0.0], [1.0, 1.0]], 0.5), sched)
    for b in (None, base):
        aux = LearnedScore.create(2, sched, hidden=(8, 8), rng=rng, base=b)
        if b is not None:
            aux.net.params[-2][...] = rng.normal(size=aux.net.params[-2].shape)
        x, t = rng.normal(size=(4, 2)), np.full(4, 0.3)
        J = aux.jacobian(x, t)
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (aux.score(x + e, t) - aux.score(x - e, t)) / (2 * h)
            assert np.allclose(J[:, :, j], fd, atol=1e-6)
        v = rng.normal(size=(4, 2))
        assert np.allclose(aux.vjp(x, t, v), np.einsum("nij,ni->nj", J, v), atol=1e-12)


def test_residual_form_starts_at_base(sched, rng):
    base = AnalyticMixtureScore(GaussianMixture.gaussian([0.0, 0.0], np.eye(2)), sched)
    aux = LearnedScore.create(2, sched, rng=rng, base=base)
    x, t = rng.normal(size=(5, 2)), rng.uniform(0.01, 1.0, 5)
    assert np.array_equal(aux.score(x, t), base.score(x, t))


def test_conditional_net_requires_condition(sched, rng):
    aux = LearnedScore.create(2, sched, hidden=(8,), rng=rng, cond_dim=1)
    with pytest.raises(ValueError):
        aux.score(np.zeros((2, 2)), 0.5)
    c = Conditioned(aux, np.array([[0.5], [1.0]]))
    assert np.array_equal(c.score(np.zeros((2, 2)), 0.5), aux.score(np.zeros((2, 2)), 0.5, np.array([[0.5], [1.0]])))


def test_dsm_loss_decreases(sched):
    rng = np.random.default_rng(3)
    aux = LearnedScore.create(2, sched, rng=rng)
    opt = AdamState(lr=2e-3)
    losses = [dsm_train_step(aux, opt, TWO[rng.integers(0, 2, 256)], sched, rng) for _ in range(500)]
    run = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert run[-1] < 0.5 * run[0]
    assert np.mean(losses[-100:]) < np.mean(losses[100:200])
    with pytest.raises(ValueError):
        dsm_train_step(aux, opt, np.zeros((0, 2)), sched, rng)


def test_dsm_floor_at_exact_score(sched):
    # a residual net with a zero last layer is exactly the particle score
    rng = np.random.default_rng(4)
    exact = ParticleMarginalScore(TWO, sched)
    aux = LearnedScore.create(2, sched, hidden=(4,), rng=rng, base=exact)
    batch = TWO[rng.integers(0, 2, 20_000)]
    loss = dsm_train_step(aux, AdamState(lr=0.0), batch, sched, np.random.default_rng(5))
    r = np.random.default_rng(5)
    t = r.uniform(sched.t_min, sched.t_max, size=len(batch))
    eps = r.standard_normal(batch.shape)
    a, sg = sched.alpha_sigma(t)
    xt = a[:, None] * batch + sg[:, None] * eps
    direct = np.mean(sg**2 * ((exact.score(xt, t) - conditional_score(sched, xt, batch, t)) ** 2).sum(1))
    assert loss == pytest.approx(direct, rel=1e-10)
    assert loss > 0.01


@pytest.mark.parametrize("residual", [False, True])
def test_dsm_converges_to_particle_score(sched, residual):
    rng = np.random.default_rng(0)
    base = AnalyticMixtureScore(GaussianMixture.gaussian([0.0, 0.0], np.eye(2)), sched) if residual else None
    aux = LearnedScore.create(2, sched, rng=rng, base=base)
    opt = AdamState(lr=2e-3)
    for _ in range(2000):
        dsm_train_step(aux, opt, TWO[rng.integers(0, 2, 256)], sched, rng)
    pm = ParticleMarginalScore(TWO, sched)
    for t in (0.2, 0.4, 0.7):
        a, sg = sched.alpha_sigma(np.array(t))
        g = np.linspace(-3, 3, 61)
        x = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        near = np.min(np.linalg.norm(x[:, None, :] - a * TWO[None], axis=-1), axis=1) <= 2 * sg
        x = x[near]
        ref = pm.score(x, t)
        rel = np.mean((aux.score(x, t) - ref) ** 2) / np.mean(ref**2)
        assert rel < 0.05, (t, rel)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_deterministic(seed):
    r = np.random.default_rng(seed)
    net = FeedForwardNet([2, 5, 2], rng=r)
    x = r.normal(size=(3, 2))
    assert np.array_equal(net_forward(net, x), net_forward(net, x))
