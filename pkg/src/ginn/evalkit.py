"""Imputation metrics, downstream classifiers, rank statistics and the benchmark harness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import baselines
from .errors import ConfigurationError, MetricError, NumericError
from .model import VARIANTS, GinnConfig, variant_config
from .tabular import Dataset, attach_labels, denormalize, inject_mcar, injected_mask, split
from .trainer import AdamState, TrainConfig, fit_impute

BASELINE_METHODS = ("median", "mean", "knn", "mf", "clean")
CLASSIFIERS = ("knn", "logistic")
MIN_FRIEDMAN_METHODS = 3
MIN_FRIEDMAN_BLOCKS = 5


# ---------------------------------------------------------------------------
# metrics


def imputation_error(truth, imputed, injected) -> tuple[float, float]:
    """MAE and RMSE over the injected positions only."""
    truth = np.asarray(truth, dtype=float)
    imputed = np.asarray(imputed, dtype=float)
    mask = np.asarray(injected).astype(bool)
    if not (truth.shape == imputed.shape == mask.shape):
        raise ValueError(f"shape mismatch {truth.shape}, {imputed.shape}, {mask.shape}")
    if not mask.any():
        raise MetricError("no injected entries: imputation error is undefined")
    diff = truth[mask] - imputed[mask]
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff * diff)))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise MetricError("accuracy of an empty prediction set is undefined")
    return float(np.mean(y_true == y_pred))


# ---------------------------------------------------------------------------
# classifiers


def knn_classify(train_X, train_y, test_X, k: int = 5) -> np.ndarray:
    """Majority vote of the ``k`` nearest training rows (Euclidean).

    A tied vote goes to whichever tied label appears first in distance order.
    """
    train_X = np.asarray(train_X, dtype=float)
    test_X = np.asarray(test_X, dtype=float)
    train_y = np.asarray(train_y)
    if k < 1 or k > train_X.shape[0]:
        raise ValueError(f"k must lie in [1, {train_X.shape[0]}], got {k}")
    sq = (
        np.sum(test_X**2, axis=1)[:, None]
        + np.sum(train_X**2, axis=1)[None, :]
        - 2.0 * test_X @ train_X.T
    )
    order = np.argsort(np.maximum(sq, 0.0), axis=1, kind="stable")[:, :k]
    out = np.empty(test_X.shape[0], dtype=train_y.dtype)
    for i, nb in enumerate(order):
        labels = train_y[nb]
        values, counts = np.unique(labels, return_counts=True)
        tied = set(values[counts == counts.max()].tolist())
        out[i] = next(lab for lab in labels if lab in tied)
    return out


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def logistic_fit(train_X, train_y, l2: float = 1e-3, iters: int = 500, lr: float = 1e-2):
    """Multinomial logistic regression by full-batch Adam; bias is not penalized.

    Returns ``(W, b, classes)``.
    """
    X = np.asarray(train_X, dtype=float)
    y = np.asarray(train_y)
    if l2 < 0 or iters < 1:
        raise ValueError("l2 must be >= 0 and iters >= 1")
    classes, codes = np.unique(y, return_inverse=True)
    n, p = X.shape
    Y = np.zeros((n, classes.size))
    Y[np.arange(n), codes] = 1.0
    params = {"W": np.zeros((p, classes.size)), "b": np.zeros(classes.size)}
    opt = AdamState()
    for it in range(iters):
        P = _softmax(X @ params["W"] + params["b"])
        R = (P - Y) / n
        grads = {"W": X.T @ R + l2 * params["W"], "b": R.sum(axis=0)}
        try:
            opt.step(params, grads, lr)
        except NumericError as exc:
            raise NumericError(f"logistic regression diverged at iteration {it}") from exc
    return params["W"], params["b"], classes


def logistic_classify(train_X, train_y, test_X, l2: float = 1e-3, iters: int = 500) -> np.ndarray:
    W, b, classes = logistic_fit(train_X, train_y, l2, iters)
    scores = np.asarray(test_X, dtype=float) @ W + b
    return classes[np.argmax(scores, axis=1)]


def classify(name: str, train_X, train_y, test_X, k: int = 5) -> np.ndarray:
    if name == "knn":
        return knn_classify(train_X, train_y, test_X, min(k, len(train_y)))
    if name == "logistic":
        return logistic_classify(train_X, train_y, test_X)
    raise ConfigurationError(f"unknown classifier '{name}' (choose from {', '.join(CLASSIFIERS)})")


# ---------------------------------------------------------------------------
# ranks and the Friedman test


def average_ranks(values, higher_is_better: bool = True) -> np.ndarray:
    """Ranks 1..k of one block; rank 1 is best and ties share their mean rank."""
    v = np.asarray(values, dtype=float)
    key = -v if higher_is_better else v
    order = np.argsort(key, kind="stable")
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and key[order[j + 1]] == key[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_table(table, higher_is_better: bool = True) -> np.ndarray:
    """Rank every column (block) of a methods x blocks table."""
    T = np.asarray(table, dtype=float)
    return np.column_stack([average_ranks(T[:, j], higher_is_better) for j in range(T.shape[1])])


def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the upper tail
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma ``Q(a, x)``."""
    if a <= 0 or x < 0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, x))
    return min(1.0, _gamma_continued_fraction(a, x))


def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-square distribution."""
    if df < 1:
        raise ValueError("df must be >= 1")
    return regularized_gamma_q(df / 2.0, max(x, 0.0) / 2.0)


@dataclass(frozen=True)
class FriedmanResult:
    statistic: float
    p_value: float
    mean_ranks: np.ndarray


def friedman_test(table, higher_is_better: bool = True) -> FriedmanResult:
    """Friedman chi-square over a methods x blocks table."""
    T = np.asarray(table, dtype=float)
    if T.ndim != 2:
        raise ValueError("table must be two-dimensional (methods x blocks)")
    k, N = T.shape
    if k < MIN_FRIEDMAN_METHODS or N < MIN_FRIEDMAN_BLOCKS:
        raise ValueError(
            f"Friedman test needs >= {MIN_FRIEDMAN_METHODS} methods and "
            f">= {MIN_FRIEDMAN_BLOCKS} blocks, got {k} x {N}"
        )
    R = rank_table(T, higher_is_better)
    mean_ranks = R.mean(axis=1)
    stat = 12.0 * N / (k * (k + 1)) * (np.sum(mean_ranks**2) - k * (k + 1) ** 2 / 4.0)
    # same quantity from raw rank sums
    check = 12.0 / (N * k * (k + 1)) * np.sum(R.sum(axis=1) ** 2) - 3.0 * N * (k + 1)
    if not math.isclose(stat, check, rel_tol=1e-9, abs_tol=1e-9):
        raise ArithmeticError(f"Friedman statistic cross-check failed: {stat} vs {check}")
    stat = max(float(stat), 0.0)
    return FriedmanResult(stat, chi2_sf(stat, k - 1), mean_ranks)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class Cell:
    dataset: str
    noise: float
    seed: int
    method: str
    mae: float | None = None
    rmse: float | None = None
    accuracy: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        out = {
            "dataset": self.dataset,
            "noise": self.noise,
            "seed": self.seed,
            "method": self.method,
            "mae": self.mae,
            "rmse": self.rmse,
            "accuracy": dict(self.accuracy),
        }
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class EvalReport:
    cells: list[Cell]
    ranks: dict[str, float]
    rank_metric: str
    friedman: dict | None
    notices: list[str] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def summary(self) -> list[dict]:
        """Mean and standard deviation over seeds per (dataset, noise, method)."""
        groups: dict[tuple, list[Cell]] = {}
        for c in self.cells:
            groups.setdefault((c.dataset, c.noise, c.method), []).append(c)
        rows = []
        for (dataset, noise, method), cells in groups.items():
            row = {"dataset": dataset, "noise": noise, "method": method, "n_seeds": len(cells)}
            for metric in ("mae", "rmse"):
                row[metric] = _mean_std([c.mae if metric == "mae" else c.rmse for c in cells])
            clfs = dict.fromkeys(k for c in cells for k in c.accuracy)
            row["accuracy"] = {k: _mean_std([c.accuracy.get(k) for c in cells]) for k in clfs}
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for c in self.cells],
            "ranks": dict(self.ranks),
            "rank_metric": self.rank_metric,
            "friedman": self.friedman,
            "summary": self.summary(),
            "notices": list(self.notices),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def format_table(self) -> str:
        """Aligned plain-text summary, one line per (dataset, noise, method)."""
        summary = self.summary()
        clfs = list(dict.fromkeys(k for r in summary for k in r["accuracy"]))
        header = ["dataset", "noise", "method", "MAE", "RMSE"] + [f"acc[{c}]" for c in clfs] + ["rank"]
        lines = [header]
        for r in summary:
            line = [r["dataset"], f"{r['noise']:g}", r["method"], _fmt(r["mae"]), _fmt(r["rmse"])]
            line += [_fmt(r["accuracy"].get(c)) for c in clfs]
            rank = self.ranks.get(r["method"])
            line.append("-" if rank is None else f"{rank:.2f}")
            lines.append(line)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        text = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines]
        if self.friedman is not None:
            text.append(
                f"Friedman ({self.rank_metric}): statistic {self.friedman['statistic']:.4f}, "
                f"p-value {self.friedman['p_value']:.4g}"
            )
        text.extend(f"note: {n}" for n in self.notices)
        return "\n".join(text) + "\n"


def _mean_std(values) -> dict | None:
    v = [x for x in values if x is not None]
    if not v:
        return None
    arr = np.asarray(v, dtype=float)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def _fmt(stat: dict | None) -> str:
    return "-" if stat is None else f"{stat['mean']:.4f}±{stat['std']:.4f}"


def _validate(methods, classifiers) -> None:
    known = set(VARIANTS) | set(BASELINE_METHODS)
    for m in methods:
        if m not in known:
            raise ConfigurationError(f"unknown method '{m}' (choose from {', '.join(sorted(known))})")
    for c in classifiers:
        if c not in CLASSIFIERS:
            raise ConfigurationError(f"unknown classifier '{c}' (choose from {', '.join(CLASSIFIERS)})")
    if not methods:
        raise ConfigurationError("at least one method is required")


def impute_with(
    method: str,
    ds: Dataset,
    seed: int,
    ginn_config: GinnConfig | None = None,
    train_config: TrainConfig | None = None,
    percentile: float | None = None,
) -> np.ndarray:
    """Impute ``ds`` (no labels attached) with a named method; returns n x d encoded."""
    if method == "median":
        return baselines.impute_median(ds)
    if method == "mean":
        return baselines.impute_mean(ds)
    if method == "knn":
        return baselines.impute_knn(ds)
    if method == "mf":
        return baselines.impute_mf(ds, seed=seed)
    if method in VARIANTS:
        cfg = variant_config(method, ginn_config)
        tcfg = replace(train_config or TrainConfig(), seed=seed)
        work = attach_labels(ds) if ds.labels is not None else ds
        kwargs = {} if percentile is None else {"percentile": percentile}
        _, _, result = fit_impute(work, cfg, tcfg, include_labels=True, **kwargs)
        return result.X_imp[:, : ds.d]
    raise ConfigurationError(f"unknown method '{method}'")


def run_benchmark(
    ds: Dataset,
    noise_levels: Sequence[float],
    methods: Sequence[str],
    classifiers: Sequence[str] = CLASSIFIERS,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    dataset_name: str = "data",
    ginn_config: GinnConfig | None = None,
    train_config: TrainConfig | None = None,
    percentile: float | None = None,
    train_fraction: float = 0.7,
    k: int = 5,
) -> EvalReport:
    """Split, damage, impute, score and rank every (noise, seed, method) cell.

    Imputation errors are in original units over injected train entries.
    Classifiers train on the normalized imputed train features and are scored
    on the test rows. Noise 0 skips injection and imputation metrics. Method
    ``clean`` trains classifiers on the undamaged train rows.
    """
    methods, classifiers = list(methods), list(classifiers)
    _validate(methods, classifiers)
    if ds.label_cols is not None:
        raise ConfigurationError("pass the dataset without attached label columns")
    if classifiers and ds.labels is None:
        raise ConfigurationError("classifiers need a dataset with a label column")
    for noise in noise_levels:
        if not 0.0 <= noise < 1.0:
            raise ValueError(f"noise level must lie in [0, 1), got {noise}")

    cells: list[Cell] = []
    notices: list[str] = []
    for noise in noise_levels:
        for seed in seeds:
            sp = split(ds, train_fraction, seed)
            train, test = ds.take(sp.train_indices), ds.take(sp.test_indices)
            damaged = inject_mcar(train, noise, seed) if noise > 0 else train
            inj = injected_mask(train, damaged)
            truth = denormalize(train, train.X)
            test_X = _complete_test(test, train)
            for method in methods:
                cell = Cell(dataset_name, float(noise), int(seed), method)
                cells.append(cell)
                try:
                    if method == "clean":
                        if (train.M == 0).any():
                            raise ConfigurationError("the clean baseline needs a complete dataset")
                        X_imp = train.X
                    else:
                        X_imp = impute_with(method, damaged, seed, ginn_config, train_config, percentile)
                except NumericError as exc:
                    cell.error = str(exc)
                    notices.append(f"{method} failed at noise {noise:g}, seed {seed}: {exc}")
                    continue
                if noise > 0 and method != "clean":
                    cell.mae, cell.rmse = imputation_error(truth, denormalize(train, X_imp), inj)
                for clf in classifiers:
                    known_tr = train.labels >= 0
                    known_te = test.labels >= 0
                    pred = classify(clf, X_imp[known_tr], train.labels[known_tr], test_X[known_te], k)
                    cell.accuracy[clf] = accuracy(test.labels[known_te], pred)

    ranks, metric, friedman = _rank_cells(cells, methods, classifiers, notices)
    return EvalReport(cells, ranks, metric, friedman, notices)


def _complete_test(test: Dataset, train: Dataset) -> np.ndarray:
    # pre-existing gaps in test rows get the train column fill
    if (test.M == 1).all():
        return test.X
    return np.where(test.M == 1, test.X, baselines.impute_median(train)[0])


def _rank_cells(cells: list[Cell], methods, classifiers, notices):
    ranked = [m for m in methods if m != "clean"] or methods
    use_rmse = any(c.rmse is not None for c in cells)
    if use_rmse:
        metric, higher = "rmse", False
        value = lambda c: c.rmse  # noqa: E731
    elif classifiers:
        metric, higher = f"accuracy:{classifiers[0]}", True
        value = lambda c: c.accuracy.get(classifiers[0])  # noqa: E731
    else:
        notices.append("nothing to rank: no imputation metrics and no classifiers")
        return {}, "none", None
    by_block: dict[tuple, dict[str, float]] = {}
    for c in cells:
        v = value(c)
        if c.method in ranked and v is not None:
            by_block.setdefault((c.dataset, c.noise, c.seed), {})[c.method] = v
    blocks = [b for b in by_block.values() if len(b) == len(ranked)]
    if len(blocks) < len(by_block):
        notices.append(f"{len(by_block) - len(blocks)} block(s) with failed methods left out of the ranking")
    if not blocks:
        notices.append("no complete block to rank")
        return {}, metric, None
    table = np.array([[b[m] for b in blocks] for m in ranked])
    mean_ranks = rank_table(table, higher).mean(axis=1)
    ranks = {m: float(r) for m, r in zip(ranked, mean_ranks)}
    try:
        res = friedman_test(table, higher)
    except ValueError as exc:
        notices.append(f"Friedman test skipped: {exc}")
        return ranks, metric, None
    friedman = {"statistic": res.statistic, "p_value": res.p_value, "methods": len(ranked), "blocks": len(blocks)}
    return ranks, metric, friedman
