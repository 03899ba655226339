"""Row-similarity graph construction for incomplete data.

Distances only use coordinates observed in both rows; pairs without a shared
coordinate get no edge. Similarities ``1 / (1 + d)`` are pruned row by row
with a nearest-rank percentile threshold, twice, and the surviving weights
form a symmetric sparse adjacency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import SchemaError
from .tabular import Dataset

DEFAULT_PERCENTILE = 97.72
SPECTRAL_MAX_NODES = 64


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    A: sp.csr_matrix
    L_hat: sp.csr_matrix
    L_tilde: sp.csr_matrix
    percentile: float

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_edges(self) -> int:
        """Undirected edge count."""
        return self.A.nnz // 2


def masked_distance(xi, xj, mi, mj) -> float | None:
    """Euclidean distance over coordinates observed in both rows.

    Returns ``None`` when the two rows share no observed coordinate.
    """
    xi, xj, mi, mj = (np.asarray(v, dtype=float) for v in (xi, xj, mi, mj))
    if not (xi.shape == xj.shape == mi.shape == mj.shape) or xi.ndim != 1:
        raise ValueError("masked_distance expects four vectors of equal length")
    shared = mi * mj
    if not shared.any():
        return None
    diff = (xi - xj) * shared
    return float(np.sqrt(np.dot(diff, diff)))


def _distance_rows(Xa, Ma, Xb, Mb) -> np.ndarray:
    """Masked distances between every row of ``a`` and every row of ``b``.

    Absent pairs (no shared support) are NaN. Computed one row at a time so
    identical rows give exactly 0.
    """
    out = np.empty((Xa.shape[0], Xb.shape[0]))
    for i in range(Xa.shape[0]):
        shared = Ma[i] * Mb
        diff = (Xa[i] - Xb) * shared
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        d[~shared.any(axis=1)] = np.nan
        out[i] = d
    return out


def _features(ds: Dataset, include_labels: bool) -> tuple[np.ndarray, np.ndarray]:
    if include_labels or ds.label_cols is None:
        return ds.X, ds.M
    k = ds.label_cols[0]
    return ds.X[:, :k], ds.M[:, :k]


def masked_distances(ds: Dataset, include_labels: bool = True) -> np.ndarray:
    """Full ``n x n`` masked distance matrix, NaN where undefined."""
    X, M = _features(ds, include_labels)
    return _distance_rows(X, M, X, M)


def _to_similarity(D: np.ndarray) -> np.ndarray:
    S = 1.0 / (1.0 + D)
    S[np.isnan(S)] = 0.0
    return S


def build_similarity(ds: Dataset, include_labels: bool = False) -> np.ndarray:
    """Dense similarity matrix ``1 / (1 + d_ij)``; 0 on the diagonal and for absent pairs."""
    if ds.n < 2:
        raise ValueError("need at least two rows to build a similarity graph")
    S = _to_similarity(masked_distances(ds, include_labels))
    np.fill_diagonal(S, 0.0)
    return S


def nearest_rank_threshold(values: np.ndarray, percentile: float) -> float:
    """Sorted-ascending value at index ``ceil(p/100 * count) - 1``."""
    v = np.sort(np.asarray(values, dtype=float))
    idx = max(math.ceil(percentile / 100.0 * v.size) - 1, 0)
    return float(v[idx])


def _check_percentile(percentile: float) -> None:
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must lie in (0, 100), got {percentile}")


def _threshold_rows(S: np.ndarray, percentile: float, rows, nonzero_only: bool) -> np.ndarray:
    """Zero the entries of ``rows`` that fall strictly below their row threshold."""
    kept = np.zeros_like(S)
    n_cols = S.shape[1]
    for i in rows:
        row = S[i]
        if nonzero_only:
            candidates = row[row > 0]
        else:
            candidates = np.delete(row, i) if i < n_cols else row
        if candidates.size == 0:
            continue
        t = nearest_rank_threshold(candidates, percentile)
        keep = row >= t
        kept[i, keep] = row[keep]
    return kept


def prune(S: np.ndarray, percentile: float = DEFAULT_PERCENTILE) -> sp.csr_matrix:
    """Two-pass row-wise percentile pruning, symmetrized by elementwise max.

    The first pass ranks every off-diagonal entry of a row; the second ranks
    only the row's nonzero survivors of the first.
    """
    _check_percentile(percentile)
    S = np.array(S, dtype=float)
    np.fill_diagonal(S, 0.0)
    rows = range(S.shape[0])
    P = _threshold_rows(S, percentile, rows, nonzero_only=False)
    P = np.maximum(P, P.T)
    P = _threshold_rows(P, percentile, rows, nonzero_only=True)
    P = np.maximum(P, P.T)
    np.fill_diagonal(P, 0.0)
    A = sp.csr_matrix(P)
    A.eliminate_zeros()
    A.sort_indices()
    return A


def propagation_operators(A: sp.spmatrix) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Renormalized operators with and without self-loops.

    ``L_hat = D~^-1/2 (A + I) D~^-1/2`` and ``L_tilde = D^-1/2 A D^-1/2``;
    zero-degree rows of ``L_tilde`` stay zero.
    """
    A = sp.csr_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1] or abs(A - A.T).max() != 0:
        raise ValueError("adjacency must be square and symmetric")
    n = A.shape[0]
    A_self = A + sp.identity(n, format="csr")
    deg_hat = np.asarray(A_self.sum(axis=1)).ravel()
    inv_hat = sp.diags(1.0 / np.sqrt(deg_hat))
    L_hat = sp.csr_matrix(inv_hat @ A_self @ inv_hat)

    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros(n)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    inv_d = sp.diags(inv)
    L_tilde = sp.csr_matrix(inv_d @ A @ inv_d)
    for L in (L_hat, L_tilde):
        L.eliminate_zeros()
        L.sort_indices()
    return L_hat, L_tilde


def build_graph(
    ds: Dataset, percentile: float = DEFAULT_PERCENTILE, include_labels: bool = False
) -> SimilarityGraph:
    A = prune(build_similarity(ds, include_labels), percentile)
    L_hat, L_tilde = propagation_operators(A)
    return SimilarityGraph(A, L_hat, L_tilde, percentile)


def identity_graph(n: int) -> SimilarityGraph:
    """Edgeless graph: ``L_hat = I`` and ``L_tilde = 0`` (the plain DAE case)."""
    A = sp.csr_matrix((n, n))
    return SimilarityGraph(A, sp.identity(n, format="csr"), sp.csr_matrix((n, n)), 0.0)


def extend_graph(g: SimilarityGraph, old_ds: Dataset, new_rows: Dataset) -> SimilarityGraph:
    """Add ``new_rows`` as nodes, keeping every existing edge untouched.

    Candidate edges of the new rows (to old and other new rows) are pruned
    with the same two-pass percentile rule; label columns are ignored.
    """
    if old_ds.n != g.n:
        raise SchemaError(f"graph has {g.n} nodes but dataset has {old_ds.n} rows")
    old_specs, new_specs = old_ds.feature_specs, new_rows.feature_specs
    if len(old_specs) != len(new_specs) or not all(
        a.same_schema(b) for a, b in zip(old_specs, new_specs)
    ):
        raise SchemaError("new rows do not share the dataset's column specs")
    n_old, n_new = old_ds.n, new_rows.n
    if n_new == 0:
        return g
    _check_percentile(g.percentile)
    Xo, Mo = _features(old_ds, False)
    Xn, Mn = _features(new_rows, False)
    X = np.vstack([Xo, Xn])
    M = np.vstack([Mo, Mn])
    # rows: new nodes, columns: all nodes (old first)
    S = _to_similarity(_distance_rows(Xn, Mn, X, M))
    S[np.arange(n_new), n_old + np.arange(n_new)] = 0.0

    def sym(P):
        # union over the new-new block; new-old edges are owned by new rows
        nn = P[:, n_old:]
        P[:, n_old:] = np.maximum(nn, nn.T)
        return P

    P = np.zeros_like(S)
    for i in range(n_new):
        row = S[i]
        cand = np.delete(row, n_old + i)
        t = nearest_rank_threshold(cand, g.percentile)
        keep = row >= t
        keep[n_old + i] = False
        P[i, keep] = row[keep]
    P = sym(P)
    Q = np.zeros_like(P)
    for i in range(n_new):
        row = P[i]
        cand = row[row > 0]
        if cand.size == 0:
            continue
        t = nearest_rank_threshold(cand, g.percentile)
        keep = row >= t
        Q[i, keep] = row[keep]
    Q = sym(Q)
    Q[np.arange(n_new), n_old + np.arange(n_new)] = 0.0

    E = sp.csr_matrix(Q)  # n_new x (n_old + n_new)
    E_old = E[:, :n_old]
    E_new = E[:, n_old:]
    A = sp.bmat([[g.A, E_old.T], [E_old, E_new]], format="csr")
    A.eliminate_zeros()
    A.sort_indices()
    L_hat, L_tilde = propagation_operators(A)
    return SimilarityGraph(A, L_hat, L_tilde, g.percentile)


def spectral_oracle(A: sp.spmatrix) -> tuple[np.ndarray, np.ndarray]:
    """Dense eigendecomposition of the combinatorial Laplacian ``D - A``.

    Test oracle for small graphs only.
    """
    n = A.shape[0]
    if n > SPECTRAL_MAX_NODES:
        raise ValueError(f"spectral oracle limited to {SPECTRAL_MAX_NODES} nodes, got {n}")
    dense = np.asarray(sp.csr_matrix(A).todense(), dtype=float)
    lap = np.diag(dense.sum(axis=1)) - dense
    return np.linalg.eigh(lap)


def write_edge_list(A: sp.spmatrix, path) -> None:
    """Debug dump: one ``i j weight`` line per stored entry, sorted by (i, j)."""
    coo = sp.csr_matrix(A).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        for k in order:
            fh.write(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n")
