"""Bundled and synthetic datasets."""

from __future__ import annotations

from importlib.resources import files

import numpy as np

from .tabular import Dataset, SpecConfig, from_array, load_csv

IONOSPHERE_N = 351
IONOSPHERE_GOOD = 225


def iris_paths():
    """Paths of the bundled iris CSV and its column spec."""
    root = files("ginn") / "data"
    return root / "iris.csv", root / "iris.json"


def load_iris() -> Dataset:
    """Fisher's iris: 150 rows, 4 numerical features, label ``species``."""
    csv_path, spec_path = iris_paths()
    return load_csv(csv_path, SpecConfig.load(spec_path))


def ionosphere_like(n: int = IONOSPHERE_N, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Synthetic stand-in for the ionosphere radar data (34 features, 2 classes).

    Column 0 is binary and column 1 is constant 0, as in the original. The
    remaining 32 columns are 16 complex pulse returns ``r_k * (cos, sin)(phi_k)``
    driven by a per-row latent phase ``t``: ``phi_k = k * t + c`` with a
    class-dependent offset ``c`` and slowly decaying ``r_k``. Rows with close
    ``t`` look alike, while the map from a partial row to the rest is highly
    nonlinear. About 64% of the rows are class ``g``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    n_good = int(round(n * IONOSPHERE_GOOD / IONOSPHERE_N))
    y = np.zeros(n, dtype=int)
    y[n_good:] = 1
    y = rng.permutation(y)
    t = rng.uniform(0.0, 2.0 * np.pi, size=n)
    k = np.arange(1, 17)
    offset = np.where(y == 0, 0.0, np.pi / 3.0)
    radius = np.where(y == 0, 0.9, 0.6)[:, None] * np.exp(-k / 24.0)[None, :]
    phi = np.outer(t, k) + offset[:, None]
    pulses = np.empty((n, 32))
    pulses[:, 0::2] = radius * np.cos(phi)
    pulses[:, 1::2] = radius * np.sin(phi)
    pulses += rng.normal(scale=noise, size=pulses.shape)
    pulses = np.clip(pulses, -1.0, 1.0)
    first = np.where(y == 0, 1.0, (rng.random(n) < 0.7).astype(float))
    values = np.column_stack([first, np.zeros(n), pulses])
    names = [f"a{j + 1:02d}" for j in range(34)]
    return from_array(values, names, labels=y, label_categories=["g", "b"])
