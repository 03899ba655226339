import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ginn import model as core
from ginn import simgraph, tabular
from ginn import trainer as tr
from ginn.errors import NumericError, SchemaError

from conftest import random_dataset

SMALL = core.GinnConfig(embedding_dim=16, critic_hidden=8)


def quick(**kw):
    base = dict(max_iters=60, patience=30, eval_every=10, critic_batch=64)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(max_iters=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(patience=5, eval_every=10)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_critic=0.0)
    cfg = tr.TrainConfig()
    assert (cfg.max_iters, cfg.lr_autoencoder, cfg.lr_critic, cfg.critic_steps_per_gen) == (10000, 1e-3, 1e-5, 5)
    assert (cfg.patience, cfg.eval_every, cfg.min_delta) == (500, 10, 1e-5)


def test_adam_first_step_is_signed_lr():
    state = tr.AdamState()
    params = {"w": np.array([[0.5, 0.5]])}
    tr.adam_step(state, params, {"w": np.array([[0.1, -0.1]])}, 1e-3)
    np.testing.assert_allclose(params["w"], [[0.5 - 1e-3, 0.5 + 1e-3]], atol=1e-10)
    assert state.t == 1 and state.m["w"].shape == (1, 2)


def test_adam_zero_gradient_leaves_parameter():
    state = tr.AdamState()
    params = {"w": np.array([[0.25]])}
    tr.adam_step(state, params, {"w": np.zeros((1, 1))}, 1e-3)
    assert params["w"][0, 0] == 0.25


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    w = np.zeros(3)
    m = v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    state, params = tr.AdamState(), {"w": np.zeros((1, 3))}
    for g in grads:
        state.step(params, {"w": g.reshape(1, 3)}, 1e-2)
    np.testing.assert_allclose(params["w"][0], w, rtol=1e-12)


def test_adam_is_deterministic_and_only_touches_given_params():
    def run():
        state = tr.AdamState()
        params = {"a": np.ones((2, 2)), "b": np.full((1, 2), 3.0)}
        for k in range(3):
            state.step(params, {"a": np.full((2, 2), 0.1 * (k + 1))}, 1e-3)
        return params

    p1, p2 = run(), run()
    np.testing.assert_array_equal(p1["a"], p2["a"])
    assert (p1["b"] == 3.0).all()


def test_adam_rejects_bad_gradients():
    state = tr.AdamState()
    params = {"w": np.zeros((1, 2))}
    with pytest.raises(NumericError, match="'w'"):
        state.step(params, {"w": np.array([[np.nan, 0.0]])}, 1e-3)
    with pytest.raises(ValueError):
        state.step(params, {"w": np.zeros((2, 2))}, 1e-3)
    assert state.t == 0


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000), flags=st.integers(0, 15), missing=st.floats(0.0, 0.5))
def test_observed_entries_preserved(seed, flags, missing):
    ds = random_dataset(15, 3, missing=missing, seed=seed, labels=seed % 2 == 0)
    ds = tabular.attach_labels(ds) if ds.labels is not None else ds
    cfg = SMALL.with_flags(flags)
    _, _, result = tr.fit_impute(ds, cfg, quick(max_iters=20, seed=seed))
    observed = ds.M == 1
    assert (result.X_imp[observed] == ds.X[observed]).all()
    assert np.isfinite(result.X_imp).all()
    assert ((result.X_imp >= 0) & (result.X_imp <= 1)).all()


def test_seed_determinism():
    ds = random_dataset(20, 4, seed=3)
    cfg = core.variant_config("a-ginn-skip-global", SMALL)
    a = tr.fit_impute(ds, cfg, quick(seed=7))[2]
    b = tr.fit_impute(ds, cfg, quick(seed=7))[2]
    c = tr.fit_impute(ds, cfg, quick(seed=8))[2]
    np.testing.assert_array_equal(a.X_imp, b.X_imp)
    assert a.history == b.history
    assert not np.array_equal(a.X_imp, c.X_imp)


def test_result_in_original_units():
    ds = random_dataset(20, 3, seed=4)
    _, _, result = tr.fit_impute(ds, SMALL, quick())
    np.testing.assert_allclose(result.X_imp_original, tabular.denormalize(ds, result.X_imp))


def test_early_stopping_restores_best_checkpoint():
    ds = random_dataset(25, 3, seed=5)
    g = simgraph.build_graph(ds)
    model, result = tr.train(ds, g, SMALL, quick(max_iters=300, patience=50))
    losses = [v for _, v in result.history]
    assert result.best_iteration == result.history[int(np.argmin(losses))][0]
    assert tr.evaluate_loss(model, ds, g) == pytest.approx(min(losses), rel=1e-12)


def test_early_stop_on_flat_loss():
    ds = random_dataset(20, 3, missing=0.0, seed=6)
    g = simgraph.build_graph(ds)
    # a vanishing learning rate keeps the loss within min_delta of the first checkpoint
    tcfg = tr.TrainConfig(max_iters=1000, patience=50, eval_every=10, lr_autoencoder=1e-12)
    _, result = tr.train(ds, g, SMALL, tcfg)
    assert result.iterations_run == 60
    assert result.best_iteration <= 60


def test_rank_one_toy_converges():
    # rank-1 matrix placed directly in the normalized space
    rng = np.random.default_rng(0)
    X = np.outer(rng.uniform(0.4, 1.0, 40), rng.uniform(0.4, 0.9, 4))
    ds = dataclasses.replace(tabular.from_array(X), X=X)
    # the global row term is the decoder's only offset, and input dropout would
    # make the optimal denoiser differ from the identity
    cfg = core.variant_config("ginn-skip-global", core.GinnConfig(dropout_rate=0.0))
    tcfg = tr.TrainConfig(max_iters=2000, patience=2000)
    _, _, result = tr.fit_impute(ds, cfg, tcfg)
    assert min(v for _, v in result.history) < 1e-3


def test_critic_and_autoencoder_updates_are_separate(monkeypatch):
    calls = []
    original = tr.AdamState.step

    def spy(self, params, grads, lr):
        calls.append((frozenset(grads), lr))
        return original(self, params, grads, lr)

    monkeypatch.setattr(tr.AdamState, "step", spy)
    ds = random_dataset(12, 3, seed=2)
    cfg = core.variant_config("a-ginn-skip-global", SMALL)
    tr.fit_impute(ds, cfg, quick(max_iters=3))
    critic, ae = frozenset(core.CRITIC_PARAMS), frozenset(core.AE_PARAMS)
    assert len(calls) == 18
    for k, (names, lr) in enumerate(calls):
        if k % 6 < 5:
            assert names == critic and lr == 1e-5
        else:
            assert names == ae and lr == 1e-3


def test_non_adversarial_never_touches_critic():
    ds = random_dataset(12, 3, seed=2)
    cfg = core.variant_config("ginn-skip-global", SMALL)
    g = simgraph.build_graph(ds)
    init = core.init_model(ds.d, cfg, 0)
    model, _ = tr.train(ds, g, cfg, quick(), model=init)
    for k in core.CRITIC_PARAMS:
        np.testing.assert_array_equal(model.params[k], init.params[k])


def test_dae_trains_without_cross_row_weights():
    ds = random_dataset(12, 3, seed=2)
    cfg = core.variant_config("dae", SMALL)
    model, graph, _ = tr.fit_impute(ds, cfg, quick())
    assert graph.n_edges == 0
    assert "theta3" not in model.trainable_autoencoder()


def test_training_log(tmp_path):
    ds = random_dataset(12, 3, seed=2)
    path = tmp_path / "log.csv"
    _, _, result = tr.fit_impute(ds, SMALL, quick(), log_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,loss"
    assert [(int(a), float(b)) for a, b in (x.split(",") for x in lines[1:])] == result.history


def test_schema_checks():
    ds = random_dataset(12, 3, seed=2)
    g = simgraph.build_graph(ds)
    with pytest.raises(SchemaError):
        tr.train(ds.take(np.arange(10)), g, SMALL, quick())
    model = core.init_model(ds.d + 1, SMALL, 0)
    with pytest.raises(SchemaError):
        tr.impute(model, ds, g)
    with pytest.raises(SchemaError):
        tr.impute_unseen(model, g, ds)


def test_impute_unseen_with_no_new_rows_matches_training():
    ds = random_dataset(20, 3, seed=9)
    model, g, result = tr.fit_impute(ds, SMALL, quick())
    empty = ds.take(np.arange(0))
    g_ext = simgraph.extend_graph(g, ds, empty)
    out = tr.impute_unseen(model, g_ext, tabular.concat(ds, empty), 0, n_new=ds.n)
    np.testing.assert_array_equal(out.X_imp, result.X_imp)


def test_impute_unseen_returns_new_rows_only():
    ds = random_dataset(30, 3, seed=10)
    old, new = ds.take(np.arange(20)), ds.take(np.arange(20, 30))
    model, g, _ = tr.fit_impute(old, SMALL, quick())
    g_ext = simgraph.extend_graph(g, old, new)
    both = tabular.concat(old, new)
    plain = tr.impute_unseen(model, g_ext, both, 0, new.n)
    tuned = tr.impute_unseen(model, g_ext, both, 20, new.n, quick())
    assert plain.X_imp.shape == tuned.X_imp.shape == (10, ds.d)
    observed = new.M == 1
    assert (plain.X_imp[observed] == new.X[observed]).all()
    assert not np.array_equal(plain.X_imp, tuned.X_imp)
    with pytest.raises(ValueError):
        tr.impute_unseen(model, g_ext, both, -1, new.n)
