"""Tabular dataset model: CSV ingestion, encoding, MCAR noise and splits.

Encoded matrices follow two conventions used everywhere else in the
package: numerical columns are min-max scaled to [0, 1] from their observed
entries, categorical variables are expanded to contiguous one-hot groups, and
missing positions hold 0 with the observation mask ``M`` carrying the
information.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ColumnTypeError,
    ConfigurationError,
    ParseError,
    SchemaError,
    VocabularyError,
)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
DEFAULT_MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class ColumnSpec:
    """One original variable and the slice of encoded columns it occupies."""

    name: str
    kind: str
    start: int
    stop: int
    observed_min: float = 0.0
    observed_max: float = 0.0
    categories: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return self.stop - self.start

    @property
    def is_numerical(self) -> bool:
        return self.kind == NUMERICAL

    def same_schema(self, other: "ColumnSpec") -> bool:
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.start == other.start
            and self.stop == other.stop
            and self.categories == other.categories
        )


@dataclass(frozen=True)
class SpecConfig:
    columns: tuple[tuple[str, str, tuple[str, ...] | None], ...]
    label: str | None = None
    missing_tokens: tuple[str, ...] = DEFAULT_MISSING_TOKENS

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SpecConfig":
        if "columns" not in raw or not isinstance(raw["columns"], list):
            raise ConfigurationError("spec config needs a 'columns' list")
        cols = []
        seen = set()
        for entry in raw["columns"]:
            try:
                name, kind = str(entry["name"]), str(entry["kind"])
            except (KeyError, TypeError) as exc:
                raise ConfigurationError(f"bad column entry {entry!r}") from exc
            if kind not in (NUMERICAL, CATEGORICAL):
                raise ConfigurationError(f"column {name!r}: unknown kind {kind!r}")
            if name in seen:
                raise ConfigurationError(f"duplicate column {name!r}")
            seen.add(name)
            cats = entry.get("categories")
            if cats is not None:
                cats = tuple(str(c) for c in cats)
                if len(set(cats)) != len(cats) or not cats:
                    raise ConfigurationError(f"column {name!r}: bad category list")
            cols.append((name, kind, cats))
        label = raw.get("label")
        if label is not None:
            kinds = {c[0]: c[1] for c in cols}
            if label not in kinds:
                raise ConfigurationError(f"label {label!r} is not a declared column")
            if kinds[label] != CATEGORICAL:
                raise ConfigurationError("label column must be categorical")
        tokens = tuple(str(t) for t in raw.get("missing_tokens", DEFAULT_MISSING_TOKENS))
        return cls(columns=tuple(cols), label=label, missing_tokens=tokens)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SpecConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Encoded feature matrix ``X`` with observation mask ``M`` (1 = observed).

    ``specs`` covers every encoded column. When labels have been attached the
    last spec describes the label group and ``label_cols`` holds its
    ``(start, stop)`` range.
    """

    X: np.ndarray
    M: np.ndarray
    specs: tuple[ColumnSpec, ...]
    labels: np.ndarray | None = None
    label_name: str | None = None
    label_categories: tuple[str, ...] = ()
    label_cols: tuple[int, int] | None = None
    header: tuple[str, ...] = ()
    missing_tokens: tuple[str, ...] = DEFAULT_MISSING_TOKENS

    def __post_init__(self):
        if self.X.shape != self.M.shape:
            raise SchemaError(f"X {self.X.shape} and M {self.M.shape} differ in shape")
        for arr in (self.X, self.M, self.labels):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def feature_specs(self) -> tuple[ColumnSpec, ...]:
        if self.label_cols is None:
            return self.specs
        return self.specs[:-1]

    @property
    def n_features(self) -> int:
        """Number of encoded columns excluding attached label columns."""
        return self.label_cols[0] if self.label_cols else self.d

    def label_indicator(self) -> np.ndarray:
        out = np.zeros(self.d, dtype=bool)
        if self.label_cols:
            out[self.label_cols[0]:self.label_cols[1]] = True
        return out

    def numerical_indicator(self) -> np.ndarray:
        out = np.zeros(self.d, dtype=bool)
        for s in self.specs:
            if s.is_numerical:
                out[s.start:s.stop] = True
        return out

    def take(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            X=self.X[rows].copy(),
            M=self.M[rows].copy(),
            labels=None if self.labels is None else self.labels[rows].copy(),
        )

    def features_only(self) -> "Dataset":
        """Drop attached label columns (labels stay available as codes)."""
        if self.label_cols is None:
            return self
        k = self.label_cols[0]
        return replace(
            self, X=self.X[:, :k].copy(), M=self.M[:, :k].copy(),
            specs=self.specs[:-1], label_cols=None,
        )


@dataclass(frozen=True)
class Split:
    train_indices: np.ndarray
    test_indices: np.ndarray

    @classmethod
    def all_train(cls, n: int) -> "Split":
        return cls(np.arange(n), np.arange(0))


# ---------------------------------------------------------------------------
# ingestion


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            rows.append(row)
    return [h.strip() for h in header], rows


def _parse_float(token: str, column: str, line: int) -> float:
    try:
        v = float(token)
    except ValueError:
        raise ColumnTypeError(
            f"column {column!r}, row {line}: non-numeric value {token!r}"
        ) from None
    if not math.isfinite(v):
        raise ColumnTypeError(f"column {column!r}, row {line}: non-finite value {token!r}")
    return v


def load_csv(
    path: str | os.PathLike,
    spec_config: SpecConfig | Mapping[str, Any] | str | os.PathLike,
    reference: Dataset | None = None,
) -> Dataset:
    """Read a CSV file into an encoded :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        CSV with a header row.
    spec_config : SpecConfig, mapping or path to a JSON document
        Column kinds, optional category lists, optional label column and the
        missing-cell tokens.
    reference : Dataset, optional
        Reuse this dataset's normalization ranges and category lists instead
        of computing them from the file (used when encoding rows that were
        not seen at training time). Values outside the reference range map
        outside [0, 1].
    """
    config = _as_config(spec_config)
    header, rows = _read_table(path)
    return from_table(header, rows, config, reference=reference)


def _as_config(spec_config) -> SpecConfig:
    if isinstance(spec_config, SpecConfig):
        return spec_config
    if isinstance(spec_config, Mapping):
        return SpecConfig.from_dict(spec_config)
    return SpecConfig.load(spec_config)


def from_table(
    header: Sequence[str],
    rows: Sequence[Sequence[str]],
    config: SpecConfig,
    reference: Dataset | None = None,
) -> Dataset:
    declared = [c[0] for c in config.columns]
    missing_cols = [c for c in declared if c not in header]
    if missing_cols:
        raise SchemaError(f"declared columns absent from header: {missing_cols}")
    extra = [h for h in header if h not in declared]
    if extra:
        raise SchemaError(f"header columns without a declaration: {extra}")

    position = {h: i for i, h in enumerate(header)}
    tokens = set(config.missing_tokens)
    n = len(rows)
    ref_specs = {s.name: s for s in reference.feature_specs} if reference else {}

    values: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    specs: list[ColumnSpec] = []
    labels = None
    label_categories: tuple[str, ...] = ()
    start = 0
    for name, kind, cats in config.columns:
        col = [row[position[name]].strip() for row in rows]
        observed = np.array([t not in tokens for t in col], dtype=bool)
        if kind == NUMERICAL:
            raw = np.zeros(n)
            for i, t in enumerate(col):
                if observed[i]:
                    raw[i] = _parse_float(t, name, i + 2)
            if name in ref_specs:
                lo, hi = ref_specs[name].observed_min, ref_specs[name].observed_max
            elif observed.any():
                lo, hi = float(raw[observed].min()), float(raw[observed].max())
            else:
                lo = hi = 0.0
            if name == config.label:
                raise ConfigurationError("label column must be categorical")
            enc = np.zeros(n)
            if hi > lo:
                enc[observed] = (raw[observed] - lo) / (hi - lo)
            values.append(enc[:, None])
            masks.append(observed[:, None].astype(float))
            specs.append(ColumnSpec(name, NUMERICAL, start, start + 1, lo, hi))
            start += 1
            continue

        if name in ref_specs:
            cats = ref_specs[name].categories
        elif cats is None and name == config.label and reference is not None:
            cats = reference.label_categories
        elif cats is None:
            cats = tuple(sorted({t for t, o in zip(col, observed) if o}))
        index = {c: k for k, c in enumerate(cats)}
        codes = np.full(n, -1, dtype=int)
        for i, t in enumerate(col):
            if observed[i]:
                if t not in index:
                    raise VocabularyError(
                        f"column {name!r}, row {i + 2}: value {t!r} not in categories {list(cats)}"
                    )
                codes[i] = index[t]
        if name == config.label:
            labels = codes
            label_categories = tuple(cats)
            continue
        onehot = np.zeros((n, len(cats)))
        onehot[observed, codes[observed]] = 1.0
        values.append(onehot)
        masks.append(np.repeat(observed[:, None], len(cats), axis=1).astype(float))
        specs.append(ColumnSpec(name, CATEGORICAL, start, start + len(cats), categories=tuple(cats)))
        start += len(cats)

    X = np.hstack(values) if values else np.zeros((n, 0))
    M = np.hstack(masks) if masks else np.zeros((n, 0))
    return Dataset(
        X=X,
        M=M,
        specs=tuple(specs),
        labels=labels,
        label_name=config.label,
        label_categories=label_categories,
        header=tuple(header),
        missing_tokens=config.missing_tokens,
    )


def from_array(
    values: np.ndarray,
    names: Sequence[str] | None = None,
    labels: Sequence[int] | None = None,
    label_categories: Sequence[str] | None = None,
) -> Dataset:
    """Build an all-numerical dataset from a float array where NaN = missing."""
    values = np.asarray(values, dtype=float)
    n, k = values.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    header = list(names)
    rows = [["NA" if np.isnan(v) else repr(float(v)) for v in r] for r in values]
    cols: list[dict[str, Any]] = [{"name": nm, "kind": NUMERICAL} for nm in names]
    raw: dict[str, Any] = {"columns": cols, "missing_tokens": ["NA"]}
    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        if label_categories is None:
            label_categories = [str(c) for c in range(int(labels.max()) + 1)]
        header.append("label")
        cols.append({"name": "label", "kind": CATEGORICAL, "categories": list(label_categories)})
        raw["label"] = "label"
        for r, y in zip(rows, labels):
            r.append("NA" if y < 0 else str(label_categories[y]))
    return from_table(header, rows, SpecConfig.from_dict(raw))


# ---------------------------------------------------------------------------
# noise, splits, labels


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inject_mcar(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Remove a uniformly chosen ``fraction`` of the observed variables.

    Categorical variables are removed as a whole one-hot group. Label columns
    are never touched. Exactly ``round(fraction * observed)`` variables are
    removed.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    specs = ds.feature_specs
    # variable-level observation: one bit per (row, spec)
    observed = np.stack([ds.M[:, s.start] == 1 for s in specs], axis=1)
    rows, var = np.nonzero(observed)
    count = _round_half_up(fraction * rows.size)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(rows.size, size=count, replace=False)
    X = ds.X.copy()
    M = ds.M.copy()
    for r, v in zip(rows[chosen], var[chosen]):
        s = specs[v]
        X[r, s.start:s.stop] = 0.0
        M[r, s.start:s.stop] = 0.0
    return replace(ds, X=X, M=M)


def injected_mask(before: Dataset, after: Dataset) -> np.ndarray:
    """Entries observed in ``before`` and missing in ``after``."""
    return ((before.M == 1) & (after.M == 0)).astype(float)


def split(ds: Dataset | int, train_fraction: float, seed: int) -> Split:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = ds if isinstance(ds, int) else ds.n
    perm = np.random.default_rng(seed).permutation(n)
    k = _round_half_up(train_fraction * n)
    return Split(np.sort(perm[:k]), np.sort(perm[k:]))


def attach_labels(ds: Dataset, split: Split | None = None) -> Dataset:
    """Append one-hot label columns; only train rows with a known label are observed.

    With ``split=None`` every row counts as a training row.
    """
    if ds.labels is None:
        raise ConfigurationError("dataset has no label column declared")
    if ds.label_cols is not None:
        raise ConfigurationError("labels are already attached")
    k = len(ds.label_categories)
    train = np.zeros(ds.n, dtype=bool)
    train[split.train_indices if split is not None else slice(None)] = True
    known = train & (ds.labels >= 0)
    onehot = np.zeros((ds.n, k))
    onehot[known, ds.labels[known]] = 1.0
    lmask = np.repeat(known[:, None], k, axis=1).astype(float)
    start = ds.d
    spec = ColumnSpec(ds.label_name or "label", CATEGORICAL, start, start + k,
                      categories=ds.label_categories)
    return replace(
        ds,
        X=np.hstack([ds.X, onehot]),
        M=np.hstack([ds.M, lmask]),
        specs=ds.specs + (spec,),
        label_cols=(start, start + k),
    )


def concat(a: Dataset, b: Dataset) -> Dataset:
    """Stack the rows of two datasets that share a schema."""
    if len(a.specs) != len(b.specs) or not all(
        x.same_schema(y) for x, y in zip(a.specs, b.specs)
    ):
        raise SchemaError("datasets have different column specs")
    if a.label_cols != b.label_cols:
        raise SchemaError("label columns attached to only one of the datasets")
    labels = None
    if a.labels is not None and b.labels is not None:
        labels = np.concatenate([a.labels, b.labels])
    return replace(a, X=np.vstack([a.X, b.X]), M=np.vstack([a.M, b.M]), labels=labels)


# ---------------------------------------------------------------------------
# decoding


def denormalize(ds: Dataset, Xhat: np.ndarray) -> np.ndarray:
    """Map an encoded matrix back to original units.

    Numerical columns are rescaled; each one-hot group becomes the argmax
    one-hot vector. Attached label columns are dropped.
    """
    Xhat = np.asarray(Xhat, dtype=float)
    if Xhat.shape != ds.X.shape:
        raise ValueError(f"shape {Xhat.shape} does not match dataset {ds.X.shape}")
    out = np.zeros((ds.n, ds.n_features))
    for s in ds.feature_specs:
        block = Xhat[:, s.start:s.stop]
        if s.is_numerical:
            out[:, s.start] = s.observed_min + block[:, 0] * (s.observed_max - s.observed_min)
        else:
            out[np.arange(ds.n), s.start + np.argmax(block, axis=1)] = 1.0
    return out


def predicted_labels(ds: Dataset, Xhat: np.ndarray) -> np.ndarray:
    """Label codes: known labels where observed, argmax of label columns otherwise."""
    if ds.labels is None:
        raise ConfigurationError("dataset has no label column declared")
    out = ds.labels.copy()
    if ds.label_cols is not None:
        lo, hi = ds.label_cols
        guess = np.argmax(np.asarray(Xhat)[:, lo:hi], axis=1)
        out = np.where(out >= 0, out, guess)
    return out


def _format_number(v: float) -> str:
    # 12 significant digits hides the rounding noise of the affine round trip
    return format(float(v), ".12g")


def to_rows(ds: Dataset, Xhat: np.ndarray) -> tuple[list[str], list[list[str]]]:
    """Render an encoded matrix as CSV cells in the original column order."""
    orig = denormalize(ds, Xhat)
    header = list(ds.header) if ds.header else [s.name for s in ds.feature_specs]
    by_name = {s.name: s for s in ds.feature_specs}
    label_codes = predicted_labels(ds, Xhat) if ds.labels is not None else None
    missing = ds.missing_tokens[-1] if ds.missing_tokens else "NA"
    rows = []
    for i in range(ds.n):
        row = []
        for name in header:
            if name == ds.label_name and label_codes is not None:
                c = label_codes[i]
                row.append(ds.label_categories[c] if c >= 0 else missing)
                continue
            s = by_name[name]
            if s.is_numerical:
                row.append(_format_number(orig[i, s.start]))
            else:
                row.append(s.categories[int(np.argmax(orig[i, s.start:s.stop]))])
        rows.append(row)
    return header, rows


def write_csv(path: str | os.PathLike, ds: Dataset, Xhat: np.ndarray) -> None:
    header, rows = to_rows(ds, Xhat)
    write_table(path, header, rows)


def write_table(path, header: Iterable[str], rows: Iterable[Iterable[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_table(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    """Raw header and string cells of a CSV file."""
    return _read_table(path)
