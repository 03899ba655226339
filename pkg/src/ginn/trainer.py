"""Training loop: Adam, alternating critic/autoencoder updates, early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from . import autograd as ag
from . import model as core
from .autograd import Tensor
from .errors import NumericError, SchemaError
from .model import GinnConfig, GinnModel
from .simgraph import DEFAULT_PERCENTILE, SimilarityGraph, build_graph, identity_graph
from .tabular import Dataset, denormalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 10000
    lr_autoencoder: float = 1e-3
    lr_critic: float = 1e-5
    critic_steps_per_gen: int = 5
    critic_batch: int = 512
    patience: int = 500
    eval_every: int = 10
    min_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for f in ("max_iters", "critic_steps_per_gen", "critic_batch", "patience", "eval_every"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.lr_autoencoder <= 0 or self.lr_critic <= 0 or self.min_delta < 0:
            raise ValueError("learning rates must be positive and min_delta nonnegative")
        if self.patience < self.eval_every:
            raise ValueError("patience must be at least eval_every")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


class AdamState:
    """Bias-corrected Adam moments for a set of named parameters."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place."""
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{k}'")
            if g.shape != params[k].shape:
                raise ValueError(f"gradient for '{k}' has shape {g.shape}, expected {params[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState, params, grads, lr: float):
    state.step(params, grads, lr)
    return params


@dataclass
class ImputationResult:
    X_imp: np.ndarray
    X_imp_original: np.ndarray
    history: list[tuple[int, float]] = field(default_factory=list)
    iterations_run: int = 0
    best_iteration: int = 0


def _reconstruct(model: GinnModel, graph: SimilarityGraph, Xin, g, params=None) -> Tensor:
    return core.forward(model, graph.L_hat, graph.L_tilde, Xin, g, params)


def evaluate_loss(model: GinnModel, ds: Dataset, graph: SimilarityGraph) -> float:
    """Reconstruction loss over all observed entries, no input noise."""
    g = core.global_vector(ds.X, ds.M)
    Xhat = _reconstruct(model, graph, ds.X, g)
    return core.reconstruction_loss(ds.X, Xhat, ds.M, ds.specs, model.config.alpha).item()


def _finish(model: GinnModel, ds: Dataset, graph: SimilarityGraph) -> tuple[np.ndarray, np.ndarray]:
    g = core.global_vector(ds.X, ds.M)
    Xhat = _reconstruct(model, graph, ds.X, g).value
    X_imp = np.where(ds.M == 1, ds.X, Xhat)
    return X_imp, denormalize(ds, X_imp)


def train(
    ds: Dataset,
    g: SimilarityGraph,
    cfg: GinnConfig,
    tcfg: TrainConfig,
    model: GinnModel | None = None,
    log_path=None,
) -> tuple[GinnModel, ImputationResult]:
    """Fit the autoencoder (and critic) to ``ds`` over graph ``g``.

    Passing ``model`` continues training from its weights (fine-tuning);
    otherwise fresh weights are drawn from ``tcfg.seed``.
    """
    if g.n != ds.n:
        raise SchemaError(f"graph has {g.n} nodes, dataset has {ds.n} rows")
    rng = np.random.default_rng(tcfg.seed)
    if model is None:
        model = core.init_model(ds.d, cfg, rng)
    else:
        if model.d != ds.d:
            raise SchemaError(f"model expects {model.d} columns, dataset has {ds.d}")
        model = model.copy()
        model.config = cfg
    X, M = ds.X, ds.M
    n = ds.n
    gvec = core.global_vector(X, M)
    ae_names = model.trainable_autoencoder()
    opt_ae, opt_critic = AdamState(), AdamState()
    batch = min(n, tcfg.critic_batch)

    history: list[tuple[int, float]] = []
    best_loss, best_params, best_iter = np.inf, None, 0
    last_improvement_loss, last_improvement_iter = np.inf, 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write("iteration,loss\n")
    it = 0
    try:
        for it in range(1, tcfg.max_iters + 1):
            Xn, _ = core.input_noise(X, M, ds.label_cols, cfg.dropout_rate, rng)
            if cfg.use_adversarial:
                fake_all = _reconstruct(model, g, Xn, gvec).value
                real_all = np.where(M == 1, X, fake_all)
                for _ in range(tcfg.critic_steps_per_gen):
                    idx = np.sort(rng.choice(n, size=batch, replace=False))
                    real, fake = real_all[idx], fake_all[idx]
                    mix = core.sample_mix(real, fake, rng)
                    tape = ag.Tape()
                    P = model.bind(tape, core.CRITIC_PARAMS)
                    loss_c = core.critic_loss(model, real, fake, tape.variable(mix), cfg.lambda_gp, P)
                    grads = ag.grad(tape, loss_c, [P[k] for k in core.CRITIC_PARAMS])
                    opt_critic.step(
                        model.params,
                        {k: gr.value for k, gr in zip(core.CRITIC_PARAMS, grads)},
                        tcfg.lr_critic,
                    )

            tape = ag.Tape()
            P = model.bind(tape, ae_names)
            Xhat = _reconstruct(model, g, Xn, gvec, P)
            recon = core.reconstruction_loss(X, Xhat, M, ds.specs, cfg.alpha)
            loss = core.generator_loss(recon, model, Xhat, P, gvec)
            grads = ag.grad(tape, loss, [P[k] for k in ae_names])
            opt_ae.step(model.params, {k: gr.value for k, gr in zip(ae_names, grads)}, tcfg.lr_autoencoder)

            if it % tcfg.eval_every == 0:
                try:
                    val = evaluate_loss(model, ds, g)
                except NumericError as exc:
                    raise NumericError(f"training diverged at iteration {it}: {exc}") from exc
                if not np.isfinite(val):
                    raise NumericError(f"training diverged at iteration {it}")
                history.append((it, val))
                if log_fh:
                    log_fh.write(f"{it},{float(val)!r}\n")
                if val < best_loss:
                    best_loss, best_iter = val, it
                    best_params = {k: v.copy() for k, v in model.params.items()}
                if val < last_improvement_loss - tcfg.min_delta:
                    last_improvement_loss, last_improvement_iter = val, it
                elif it - last_improvement_iter >= tcfg.patience:
                    log.debug("early stop at iteration %d (best %d)", it, best_iter)
                    break
    finally:
        if log_fh:
            log_fh.close()

    if best_params is not None:
        model.params = best_params
    X_imp, X_orig = _finish(model, ds, g)
    return model, ImputationResult(X_imp, X_orig, history, it, best_iter)


def impute(model: GinnModel, ds: Dataset, graph: SimilarityGraph) -> ImputationResult:
    """Single forward pass without noise; observed entries are copied through."""
    if model.d != ds.d:
        raise SchemaError(f"model expects {model.d} columns, dataset has {ds.d}")
    if graph.n != ds.n:
        raise SchemaError(f"graph has {graph.n} nodes, dataset has {ds.n} rows")
    X_imp, X_orig = _finish(model, ds, graph)
    return ImputationResult(X_imp, X_orig)


def impute_unseen(
    model: GinnModel,
    g_ext: SimilarityGraph,
    ds_all: Dataset,
    fine_tune_epochs: int = 0,
    n_new: int | None = None,
    tcfg: TrainConfig | None = None,
) -> ImputationResult:
    """Impute rows appended to a trained graph.

    ``ds_all`` holds the original rows followed by the ``n_new`` new ones; the
    result covers only the new rows. With ``fine_tune_epochs > 0`` training
    continues on the extended graph for that many iterations first.
    """
    if fine_tune_epochs < 0:
        raise ValueError("fine_tune_epochs must be >= 0")
    if model.d != ds_all.d:
        raise SchemaError(f"model expects {model.d} columns, dataset has {ds_all.d}")
    n_new = ds_all.n if n_new is None else n_new
    if fine_tune_epochs > 0:
        tcfg = replace(tcfg or TrainConfig(), max_iters=fine_tune_epochs)
        tcfg = replace(tcfg, patience=max(tcfg.patience, tcfg.eval_every))
        model, _ = train(ds_all, g_ext, model.config, tcfg, model=model)
    full = impute(model, ds_all, g_ext)
    rows = slice(ds_all.n - n_new, ds_all.n)
    return ImputationResult(full.X_imp[rows], full.X_imp_original[rows], full.history)


def fit_impute(
    ds: Dataset,
    cfg: GinnConfig | None = None,
    tcfg: TrainConfig | None = None,
    percentile: float = DEFAULT_PERCENTILE,
    include_labels: bool = True,
    log_path=None,
) -> tuple[GinnModel, SimilarityGraph, ImputationResult]:
    """Build the graph for ``ds`` (identity for the DAE ablation) and train on it."""
    cfg = cfg or GinnConfig()
    tcfg = tcfg or TrainConfig()
    if cfg.identity_adjacency:
        graph = identity_graph(ds.n)
    else:
        graph = build_graph(ds, percentile, include_labels=include_labels)
    model, result = train(ds, graph, cfg, tcfg, log_path=log_path)
    return model, graph, result
