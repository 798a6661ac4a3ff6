import math

import numpy as np
import pytest
from scipy import integrate

from busholding.nn import (Adam, CriticNet, EmbeddedMlp, GradientError, PolicyNet, backward, embedding_dim,
                           load_checkpoint, polyak_update, save_checkpoint, LOG_STD_MAX, LOG_STD_MIN)
from busholding.sac import actor_loss, critic_loss
from busholding.stochastic import RngStream
from helpers import VOCAB, max_rel_error, random_batch, random_states


@pytest.fixture
def nets():
    r = RngStream(5, 3)
    return PolicyNet(VOCAB, 60.0, r), CriticNet(VOCAB, 60.0, r), CriticNet(VOCAB, 60.0, r)


def test_embedding_dims():
    assert [embedding_dim(n) for n in VOCAB] == [20, 11, 6, 1]
    assert embedding_dim(1) == 1 and embedding_dim(500) == 50
    net = EmbeddedMlp(VOCAB, 0, 2, RngStream(0))
    assert net.dims == (20, 11, 6, 1) and net.state_dim == 41
    assert net.sizes == (41, 32, 32, 32, 2)


def test_embed_zero_tables():
    net = EmbeddedMlp(VOCAB, 0, 2, RngStream(0))
    for k in list(net.params):
        if k.startswith("emb."):
            net.params[k][:] = 0.0
    x = net.embed([[3, 4, 5, 1]], [[0.5, 0.25, 0.75]])
    assert x.shape == (1, 41)
    assert np.all(x[0, :38] == 0.0) and x[0, 38:].tolist() == [0.5, 0.25, 0.75]


def test_out_of_range_index():
    net = EmbeddedMlp(VOCAB, 0, 2, RngStream(0))
    with pytest.raises(IndexError):
        net.embed([[40, 0, 0, 0]], [[0, 0, 0]])
    with pytest.raises(IndexError):
        net.forward([[0, 0, 13, 0]], [[0, 0, 0]])


def test_fused_forward_matches_plain(nets):
    """Folded first layer agrees with the explicit lookup-concatenate-matmul network."""
    pi, q1, _ = nets
    cat, num = random_states(np.random.default_rng(0), 64)
    a = np.random.default_rng(1).uniform(0, 60, 64)
    for net, extra in ((pi, None), (q1, a * (2 / 60) - 1)):
        x = net.embed(cat, num)
        if extra is not None:
            x = np.concatenate([x, extra[:, None]], axis=1)
        for i in range(net.n_layers):
            x = x @ net.params[f"l{i}.W"] + net.params[f"l{i}.b"]
            if i < net.n_layers - 1:
                x = np.maximum(x, 0)
        out, _ = net.forward(cat, num, extra)
        np.testing.assert_allclose(out, x, rtol=1e-12, atol=1e-12)


def test_single_linear_layer_gradient():
    net = EmbeddedMlp((2, 2, 2, 2), 0, 1, RngStream(1), hidden=())
    cat, num = np.array([[1, 0, 1, 1]]), np.array([[0.3, -0.2, 0.9]])
    x = net.embed(cat, num)[0]
    y = 0.7
    out, cache = net.forward(cat, num)
    err = out[0, 0] - y
    g = backward(net, cache, err ** 2, np.array([[2 * err]]))
    np.testing.assert_allclose(g["l0.W"][:, 0], 2 * err * x, rtol=1e-12)
    assert g["l0.b"][0] == pytest.approx(2 * err)


def test_constant_loss_zero_gradient(nets):
    pi, _, _ = nets
    cat, num = random_states(np.random.default_rng(0), 8)
    _, cache = pi.forward(cat, num)
    g = backward(pi, cache, 0.0, np.zeros((8, 2)))
    assert all(np.all(v == 0) for v in g.values())


def test_non_finite_loss(nets):
    pi, _, _ = nets
    cat, num = random_states(np.random.default_rng(0), 2)
    _, cache = pi.forward(cat, num)
    with pytest.raises(GradientError):
        backward(pi, cache, float("nan"), np.zeros((2, 2)))


def test_policy_gradient_fd(nets):
    pi, q1, q2 = nets
    rng = np.random.default_rng(2)
    cat, num = random_states(rng, 16)
    noise = rng.standard_normal(16)
    _, grads, _ = actor_loss(pi, q1, q2, cat, num, noise, 0.3)
    err = max_rel_error(lambda: actor_loss(pi, q1, q2, cat, num, noise, 0.3)[0], pi.params, grads,
                        max_per_tensor=40, rng=rng)
    assert err < 1e-4


def test_critic_gradient_fd(nets):
    _, q1, _ = nets
    rng = np.random.default_rng(3)
    batch = random_batch(rng, 16)
    y = rng.normal(size=16)
    _, grads = critic_loss(q1, batch, y)
    err = max_rel_error(lambda: critic_loss(q1, batch, y)[0], q1.params, grads, max_per_tensor=40, rng=rng)
    assert err < 1e-4


def test_squash_limits(nets):
    pi = nets[0]
    assert pi.squash(np.array([0.0]))[0] == 30.0
    assert pi.squash(np.array([50.0]))[0] == pytest.approx(60.0)
    a = pi.squash(np.linspace(-15, 15, 101))
    assert np.all(a >= 0) and np.all(a <= 60)


def test_log_prob_finite_extremes(nets):
    pi = nets[0]
    u = np.array([-400.0, -30.0, 0.0, 30.0, 400.0])
    lp = pi.log_prob_u(u, np.zeros(5), np.full(5, LOG_STD_MAX))
    assert np.all(np.isfinite(lp))


@pytest.mark.parametrize("mean,log_std", [(0.0, 0.0), (1.5, -1.0), (-2.0, 1.0)])
def test_density_normalised(nets, mean, log_std):
    pi = nets[0]

    def dens(a):
        t = a / 30.0 - 1.0
        u = np.arctanh(t)
        return math.exp(pi.log_prob_u(np.array([u]), np.array([mean]), np.array([log_std]))[0])

    total, _ = integrate.quad(dens, 0.0, 60.0, limit=400, points=[30.0 * (1 + math.tanh(mean))])
    assert total == pytest.approx(1.0, abs=1e-3)


def test_log_std_clamped(nets):
    pi = nets[0]
    pi.params["l3.b"][1] = 100.0
    _, log_std, _ = pi.head(*random_states(np.random.default_rng(0), 4))
    assert np.all(log_std == LOG_STD_MAX)
    pi.params["l3.b"][1] = -100.0
    _, log_std, _ = pi.head(*random_states(np.random.default_rng(0), 4))
    assert np.all(log_std == LOG_STD_MIN)


def test_forward_pure(nets):
    pi = nets[0]
    cat, num = random_states(np.random.default_rng(0), 32)
    a, _ = pi.forward(cat, num)
    b, _ = pi.forward(cat, num)
    assert np.array_equal(a, b)


def test_adam_examples():
    p = {"w": np.array([1.0])}
    opt = Adam(lr=1e-3)
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(1.0 - 1e-3, abs=1e-9)
    q = {"w": np.array([2.0, -1.0])}
    Adam(1e-3).step(q, {"w": np.zeros(2)})
    assert q["w"].tolist() == [2.0, -1.0]
    with pytest.raises(ValueError):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_adam_deterministic():
    def run():
        p = {"w": np.array([0.5, -0.5])}
        opt = Adam(1e-2)
        for k in range(5):
            opt.step(p, {"w": np.array([0.1 * k, -0.3])})
        return p["w"]
    assert np.array_equal(run(), run())


def test_sparse_embedding_update(nets):
    _, q1, _ = nets
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 8)
    batch.cat[:, 0] = 3
    before = q1.params["emb.bus"].copy()
    _, g = critic_loss(q1, batch, rng.normal(size=8))
    Adam(1e-2).step(q1.params, g)
    changed = np.flatnonzero(np.any(q1.params["emb.bus"] != before, axis=1))
    assert changed.tolist() == [3]


def test_polyak_examples():
    t = {"x": np.array([1.0])}
    polyak_update({"x": np.array([0.0])}, t, 0.005)
    assert t["x"][0] == pytest.approx(0.995)
    t = {"x": np.array([1.0])}
    polyak_update({"x": np.array([0.0])}, t, 1.0)
    assert t["x"][0] == 0.0
    with pytest.raises(ValueError):
        polyak_update({"x": np.zeros(2)}, {"x": np.zeros(3)}, 0.5)


def test_checkpoint_round_trip(nets, tmp_path):
    pi, q1, q2 = nets
    opt = Adam(1e-3)
    _, g = critic_loss(q1, random_batch(np.random.default_rng(0), 4), np.zeros(4))
    opt.step(q1.params, g)
    path = save_checkpoint(tmp_path / "c.npz", {"policy": pi, "q1": q1}, {"q1": opt}, -1.5, 7, 2,
                           {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 7 and ck.episode == 2 and ck.log_alpha == -1.5
    assert ck.meta["extra"] == {"note": "x"}
    for name, net in (("policy", pi), ("q1", q1)):
        assert all(np.array_equal(net.params[k], ck.nets[name].params[k]) for k in net.params)
    assert ck.optimizers["q1"].t == 1
    assert all(np.array_equal(opt.m[k], ck.optimizers["q1"].m[k]) for k in opt.m)
    cat, num = random_states(np.random.default_rng(1), 3)
    assert np.array_equal(pi.forward(cat, num)[0], ck.nets["policy"].forward(cat, num)[0])


def test_checkpoint_rejects_other_files(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other"}'))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")
