import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from ginn import autograd as ag
from ginn import model as core
from ginn import simgraph, tabular
from ginn.errors import CheckpointError

from conftest import random_dataset

TWO = sp.csr_matrix([[0.5, 0.5], [0.5, 0.5]])


def small_model(d=1, m=1, h=4, **flags):
    cfg = core.GinnConfig(embedding_dim=m, critic_hidden=h, **flags)
    return core.init_model(d, cfg, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        core.GinnConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        core.GinnConfig(alpha=1.5)
    with pytest.raises(ValueError):
        core.GinnConfig(embedding_dim=0)
    with pytest.raises(ValueError):
        core.GinnConfig(lambda_gp=-1)


def test_flags_round_trip():
    for name in core.VARIANTS:
        cfg = core.variant_config(name)
        assert core.GinnConfig().with_flags(cfg.flags).flags == cfg.flags
    assert core.variant_config("dae").identity_adjacency


def test_encode_examples():
    m = small_model(d=1, m=1)
    m.params["theta1"] = np.eye(1)
    H = core.encode(m, TWO, np.array([[1.0], [3.0]]))
    assert H.value.tolist() == [[2.0], [2.0]]
    m2 = small_model(d=3, m=3)
    m2.params["theta1"] = np.eye(3)
    X = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_array_equal(core.encode(m2, sp.identity(4, format="csr"), X).value, X)
    m2.params["theta1"] = np.zeros((3, 3))
    assert (core.encode(m2, sp.identity(4, format="csr"), X).value == 0).all()
    with pytest.raises(ValueError):
        core.encode(m2, sp.identity(3, format="csr"), X)


def test_decode_zero_parameters_gives_half():
    m = small_model(d=3, m=2)
    for k in core.AE_PARAMS:
        m.params[k] = np.zeros_like(m.params[k])
    g = simgraph.build_graph(random_dataset(5, 3))
    X = core.forward(m, g.L_hat, g.L_tilde, np.ones((5, 3)), np.full(3, 0.5))
    assert (X.value == 0.5).all()


def test_decode_requires_global_vector():
    m = small_model(d=2, m=2)
    with pytest.raises(ValueError):
        core.forward(m, sp.identity(3, format="csr"), sp.csr_matrix((3, 3)), np.ones((3, 2)))


def test_skip_with_edgeless_graph_reduces_to_base():
    X = np.random.default_rng(1).uniform(size=(4, 3))
    g = simgraph.identity_graph(4)
    with_skip = small_model(d=3, m=5, use_global=False, use_skip=True)
    no_skip = small_model(d=3, m=5, use_global=False, use_skip=False)
    a = core.forward(with_skip, g.L_hat, g.L_tilde, X).value
    b = core.forward(no_skip, g.L_hat, g.L_tilde, X).value
    np.testing.assert_array_equal(a, b)


def test_isolated_node_has_no_skip_contribution():
    A = sp.csr_matrix(np.array([[0, 1.0, 0], [1.0, 0, 0], [0, 0, 0]]))
    L_hat, L_tilde = simgraph.propagation_operators(A)
    m = small_model(d=2, m=4, use_global=False)
    X = np.random.default_rng(2).uniform(size=(3, 2))
    Y = X.copy()
    Y[:2] += 1.0  # only the neighbours of nodes 0 and 1 change
    a = core.forward(m, L_hat, L_tilde, X).value
    b = core.forward(m, L_hat, L_tilde, Y).value
    np.testing.assert_array_equal(a[2], b[2])


@given(seed=st.integers(0, 1000), scale=st.floats(0.1, 3))
def test_decode_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    ds = random_dataset(12, 3, seed=seed)
    g = simgraph.build_graph(ds, 80.0)
    m = small_model(d=3, m=8)
    X = core.forward(m, g.L_hat, g.L_tilde, rng.uniform(size=(12, 3)) * scale, np.full(3, 0.5)).value
    # float64 sigmoid rounds to exactly 0 or 1 for large logits, so inputs stay moderate
    assert ((X > 0) & (X < 1)).all()


def test_dae_has_no_cross_row_terms():
    cfg = core.variant_config("dae", core.GinnConfig(embedding_dim=6))
    m = core.init_model(3, cfg, 0)
    g = simgraph.identity_graph(5)
    X = np.random.default_rng(3).uniform(size=(5, 3))
    Y = X.copy()
    Y[2] += 0.5
    a = core.forward(m, g.L_hat, g.L_tilde, X).value
    b = core.forward(m, g.L_hat, g.L_tilde, Y).value
    changed = np.nonzero((a != b).any(axis=1))[0]
    assert changed.tolist() == [2]


def test_input_noise():
    X = np.full((20, 50), 0.3)
    M = np.ones_like(X)
    same, drop = core.input_noise(X, M, None, 0.0, seed=0)
    np.testing.assert_array_equal(same, X)
    assert drop.sum() == 0
    noisy, drop = core.input_noise(X, M, None, 0.5, seed=0)
    n_drop = int(drop.sum())
    assert 430 <= n_drop <= 570
    assert np.allclose(noisy[drop == 0], 0.6) and (noisy[drop == 1] == 0).all()
    again, _ = core.input_noise(X, M, None, 0.5, seed=0)
    np.testing.assert_array_equal(noisy, again)


def test_input_noise_skips_labels_and_missing():
    X = np.full((10, 4), 0.5)
    M = np.ones_like(X)
    M[:, 1] = 0
    X[:, 1] = 0
    noisy, drop = core.input_noise(X, M, (2, 4), 0.5, seed=3)
    np.testing.assert_array_equal(noisy[:, 2:], X[:, 2:])
    assert drop[:, 1:].sum() == 0


def test_alpha_auto_counts_groups_once(write_csv):
    spec = {
        "columns": [
            {"name": "x", "kind": "numerical"},
            {"name": "z", "kind": "numerical"},
            {"name": "c", "kind": "categorical", "categories": ["a", "b", "c"]},
        ]
    }
    ds = tabular.load_csv(write_csv("x,z,c\n1,2,a\n2,3,b\n"), spec)
    assert core.resolve_alpha(ds.specs, "auto") == pytest.approx(2 / 3)
    assert core.resolve_alpha(ds.specs, 0.25) == 0.25
    with pytest.raises(ValueError):
        core.resolve_alpha(ds.specs, 2.0)


def test_reconstruction_loss_examples(write_csv):
    num = tabular.from_array(np.array([[0.0, 2.0], [1.0, np.nan], [1.0, 4.0]]))
    # normalized: [[0, 0], [1, -], [1, 1]]
    Xhat = ag.constant(np.array([[0.5, 0.0], [1.0, 0.9], [1.0, 1.0]]))
    loss = core.reconstruction_loss(num.X, Xhat, num.M, num.specs, "auto")
    assert loss.item() == pytest.approx(0.25 / 5)
    perfect = core.reconstruction_loss(num.X, ag.constant(num.X), num.M, num.specs, "auto")
    assert perfect.item() == 0.0
    cat = tabular.load_csv(
        write_csv("c\nb\n"), {"columns": [{"name": "c", "kind": "categorical", "categories": ["a", "b"]}]}
    )
    M = np.array([[0.0, 1.0]])
    ce = core.reconstruction_loss(cat.X, ag.constant([[0.9, 0.5]]), M, cat.specs, "auto")
    assert ce.item() == pytest.approx(math.log(2))


def test_reconstruction_loss_clamps_predictions(write_csv):
    cat = tabular.load_csv(
        write_csv("c\nb\n"), {"columns": [{"name": "c", "kind": "categorical", "categories": ["a", "b"]}]}
    )
    loss = core.reconstruction_loss(cat.X, ag.constant([[1.0, 0.0]]), cat.M, cat.specs, "auto")
    assert loss.item() == pytest.approx(-math.log(1e-7))


@given(seed=st.integers(0, 10_000))
def test_reconstruction_loss_ignores_masked_entries(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(6, 4, missing=0.4, seed=seed)
    Xhat = rng.uniform(size=ds.X.shape)
    base = core.reconstruction_loss(ds.X, ag.constant(Xhat), ds.M, ds.specs, "auto").item()
    X2 = np.where(ds.M == 1, ds.X, rng.uniform(size=ds.X.shape))
    Xhat2 = np.where(ds.M == 1, Xhat, rng.uniform(size=ds.X.shape))
    other = core.reconstruction_loss(X2, ag.constant(Xhat2), ds.M, ds.specs, "auto").item()
    assert other == base


def test_critic_output_is_linear_in_last_layer():
    m = small_model(d=3, m=2, h=5)
    m.params["b1"] = np.zeros((1, 5))
    m.params["b2"] = np.zeros((1, 5))
    row = np.array([[0.2, 0.4, 0.6]])
    a = core.critic_forward(m, row).item()
    b = core.critic_forward(m, 10 * row).item()
    assert b == pytest.approx(10 * a)


def _linear_critic(d, v):
    """Critic that computes v.x exactly: identity-like ReLU stack on nonnegative inputs."""
    m = small_model(d=d, m=2, h=d)
    m.params["w1"] = np.eye(d)
    m.params["w2"] = np.eye(d)
    m.params["w3"] = np.asarray(v, dtype=float).reshape(d, 1)
    for b in ("b1", "b2", "b3"):
        m.params[b] = np.zeros_like(m.params[b])
    return m


def test_critic_loss_zero_critic():
    m = _linear_critic(3, [0.0, 0.0, 0.0])
    rows = np.random.default_rng(0).uniform(0.1, 1, size=(4, 3))
    loss = core.critic_loss(m, rows, rows * 0.5, rows, lambda_gp=10.0)
    assert loss.item() == pytest.approx(10.0)


def test_critic_loss_unit_linear_critic_has_no_penalty():
    v = np.array([0.6, 0.8, 0.0])
    m = _linear_critic(3, v)
    rng = np.random.default_rng(1)
    real, fake = rng.uniform(0.1, 1, size=(4, 3)), rng.uniform(0.1, 1, size=(4, 3))
    loss = core.critic_loss(m, real, fake, core.sample_mix(real, fake, 0), lambda_gp=10.0)
    assert loss.item() == pytest.approx((fake @ v).mean() - (real @ v).mean(), abs=1e-12)
    no_pen = core.critic_loss(m, real, fake, real, lambda_gp=0.0)
    assert no_pen.item() == pytest.approx(loss.item(), abs=1e-12)


def test_critic_loss_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    m = small_model(d=3, m=2, h=4)
    real, fake = rng.uniform(size=(5, 3)), rng.uniform(size=(5, 3))
    mix = core.sample_mix(real, fake, 1)
    names = core.CRITIC_PARAMS

    def f(*ws):
        tape = next((w.tape for w in ws if w.tape is not None), None) or ag.Tape()
        P = m.constants()
        for k, w in zip(names, ws):
            P[k] = w if w.tape is tape else tape.watch(w)
        return core.critic_loss(m, real, fake, mix, 10.0, P)

    point = [m.params[k] + rng.normal(scale=0.1, size=m.params[k].shape) for k in names]
    report = ag.check_gradients(f, [point], step=1e-6, tol=1e-5, kink_guard=True)
    assert report.ok, report.failures[:3]
    assert report.max_rel_error < 1e-5


def test_generator_loss_terms():
    m = small_model(d=3, m=2, h=4)
    rng = np.random.default_rng(0)
    Xhat = ag.constant(rng.uniform(size=(4, 3)))
    recon = ag.constant([[0.7]])
    for k in ("w3", "b3"):
        m.params[k] = np.zeros_like(m.params[k])
    g = Xhat.value.mean(axis=0)
    assert core.generator_loss(recon, m, Xhat, None, g).item() == pytest.approx(0.7)
    shifted = g + 0.1
    expected = 0.7 + m.config.gamma * 0.01
    assert core.generator_loss(recon, m, Xhat, None, shifted).item() == pytest.approx(expected)
    m0 = core.GinnModel(m.params, core.GinnConfig(embedding_dim=2, critic_hidden=4, gamma=0.0))
    assert core.generator_loss(recon, m0, Xhat, None, shifted).item() == pytest.approx(0.7)


def test_sample_mix():
    real, fake = np.ones((40, 25)), np.zeros((40, 25))
    mix = core.sample_mix(real, fake, seed=0)
    assert 0.45 <= mix.mean() <= 0.55
    np.testing.assert_array_equal(core.sample_mix(real, real, 1), real)
    with pytest.raises(ValueError):
        core.sample_mix(real, fake[:3], 0)


def test_global_vector():
    X = np.array([[0.2, 1.0, 0.0], [0.4, 0.0, 1.0], [0.0, 0.0, 0.0]])
    M = np.array([[1, 1, 1], [1, 1, 1], [0, 0, 0]], dtype=float)
    np.testing.assert_allclose(core.global_vector(X, M), [0.3, 0.5, 0.5])


def test_checkpoint_round_trip(tmp_path):
    cfg = core.variant_config("ginn-skip", core.GinnConfig(embedding_dim=5, critic_hidden=3))
    m = core.init_model(4, cfg, seed=2)
    path = tmp_path / "m.ckpt"
    core.save_checkpoint(m, path)
    back = core.load_checkpoint(path)
    assert back.config.flags == cfg.flags
    assert (back.d, back.m, back.h) == (4, 5, 3)
    for k in core.PARAM_ORDER:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    blob = path.read_bytes()
    assert blob[:4] == b"GINN" and blob[4] == 1


def test_checkpoint_validation(tmp_path):
    m = small_model(d=2, m=2, h=2)
    path = tmp_path / "m.ckpt"
    core.save_checkpoint(m, path)
    blob = path.read_bytes()
    for bad, msg in [
        (b"XXXX" + blob[4:], "magic"),
        (blob[:4] + b"\x09" + blob[5:], "version"),
        (blob[:-8], "bytes"),
        (blob[:10], "short"),
    ]:
        path.write_bytes(bad)
        with pytest.raises(CheckpointError, match=msg):
            core.load_checkpoint(path)


def test_generator_loss_adversarial_weight():
    m = small_model(d=3, m=2, h=4)
    rng = np.random.default_rng(1)
    Xhat = ag.constant(rng.uniform(size=(4, 3)))
    recon = ag.constant([[0.5]])
    score = core.critic_forward(m, Xhat).value.mean()
    for w in (0.0, 0.03, 1.0):
        cfg = core.variant_config("a-ginn", core.GinnConfig(embedding_dim=2, critic_hidden=4, adversarial_weight=w))
        loss = core.generator_loss(recon, core.GinnModel(m.params, cfg), Xhat)
        assert loss.item() == pytest.approx(0.5 - w * score)
    with pytest.raises(ValueError):
        core.GinnConfig(adversarial_weight=-1.0)
