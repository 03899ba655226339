"""Reference imputers working in the encoded (normalized, one-hot) space.

All functions return an ``n x d`` matrix in which observed entries are
copied from ``ds.X`` unchanged.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .simgraph import masked_distances
from .tabular import Dataset


def _column_fill(ds: Dataset, reducer) -> np.ndarray:
    fill = np.zeros(ds.d)
    for s in ds.specs:
        rows = ds.M[:, s.start] == 1
        if s.is_numerical:
            if rows.any():
                fill[s.start] = reducer(ds.X[rows, s.start])
        else:
            # mode of the group; uniform counts (or no data) fall back to index 0
            counts = ds.X[rows, s.start:s.stop].sum(axis=0) if rows.any() else np.zeros(s.width)
            fill[s.start + int(np.argmax(counts))] = 1.0
    return fill


def impute_median(ds: Dataset) -> np.ndarray:
    """Observed column median (numerical) and mode one-hot (categorical)."""
    return np.where(ds.M == 1, ds.X, _column_fill(ds, np.median))


def impute_mean(ds: Dataset) -> np.ndarray:
    """Observed column mean (numerical) and mode one-hot (categorical)."""
    return np.where(ds.M == 1, ds.X, _column_fill(ds, np.mean))


def impute_knn(ds: Dataset, k: int = 5) -> np.ndarray:
    """Weighted average over the ``k`` nearest rows that observe each missing column.

    Distances are masked Euclidean distances; rows sharing no observed
    coordinate are never neighbours. Weights are ``1 / (1 + d)``, except that
    neighbours at distance exactly 0 take all the weight when present.
    Columns with no qualifying neighbour fall back to the column median.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    D = masked_distances(ds)
    np.fill_diagonal(D, np.nan)
    fallback = _column_fill(ds, np.median)
    out = np.where(ds.M == 1, ds.X, 0.0)
    for i in np.nonzero((ds.M == 0).any(axis=1))[0]:
        di = D[i]
        for s in ds.specs:
            if ds.M[i, s.start] == 1:
                continue
            cand = np.nonzero((ds.M[:, s.start] == 1) & ~np.isnan(di))[0]
            if cand.size == 0:
                out[i, s.start:s.stop] = fallback[s.start:s.stop]
                continue
            order = cand[np.argsort(di[cand], kind="stable")][:k]
            dist = di[order]
            w = (dist == 0).astype(float) if (dist == 0).any() else 1.0 / (1.0 + dist)
            out[i, s.start:s.stop] = w @ ds.X[order, s.start:s.stop] / w.sum()
    return out


def impute_mf(
    ds: Dataset,
    rank: int | None = None,
    lr: float = 1e-3,
    iters: int = 5000,
    seed: int = 0,
    l2: float = 1e-4,
    return_history: bool = False,
):
    """Low-rank completion ``X ~ U V^T`` by full-batch gradient descent.

    Minimizes ``0.5 * sum_observed (X - U V^T)^2 + 0.5 * l2 * (|U|^2 + |V|^2)``.
    Missing entries take the clamped reconstruction. ``rank`` defaults to
    ``min(10, d - 1)``.
    """
    if rank is None:
        rank = max(1, min(10, ds.d - 1))
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    X, M = ds.X, ds.M
    U = rng.normal(scale=0.1, size=(ds.n, rank))
    V = rng.normal(scale=0.1, size=(ds.d, rank))
    history = []
    for it in range(iters):
        R = M * (U @ V.T - X)
        loss = 0.5 * np.sum(R * R) + 0.5 * l2 * (np.sum(U * U) + np.sum(V * V))
        if not np.isfinite(loss) or loss > 1e12:
            raise NumericError(f"matrix factorization diverged at iteration {it}")
        if return_history:
            history.append(float(np.sum(R * R) / max(M.sum(), 1)))
        gU = R @ V + l2 * U
        gV = R.T @ U + l2 * V
        U -= lr * gU
        V -= lr * gV
    out = np.where(M == 1, X, np.clip(U @ V.T, 0.0, 1.0))
    return (out, history) if return_history else out
