"""CSV ingestion, seeded train/validation/test splits, standardization, synthetic data."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError, SchemaError
from .losskernels import Dataset

SYNTHETIC_KINDS = ("outlier_regression", "hetero_regression", "two_gaussians", "multiclass_blobs")


def load_csv(path, target_col: str | int, task: str = "regression", header: bool = True) -> Dataset:
    """Read a numeric CSV into a Dataset.

    ``target_col`` is a header name or a zero-based column index. For
    classification, target values are label-encoded in order of first
    appearance and need not be numeric.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if header:
        if not rows:
            raise EmptyDatasetError(f"{path}: file is empty")
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    else:
        names = None
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    width = len(rows[0])
    if isinstance(target_col, str) and not target_col.lstrip("-").isdigit():
        if names is None or target_col not in names:
            raise SchemaError(f"target column {target_col!r} not found in header {names}")
        t = names.index(target_col)
    else:
        t = int(target_col)
        if not -width <= t < width:
            raise SchemaError(f"target column index {t} out of range for {width} columns")
        t %= width

    feats, raw_targets = [], []
    for r, row in enumerate(rows, start=2 if header else 1):
        if len(row) != width:
            raise ParseError(f"expected {width} cells, found {len(row)}", r, len(row))
        vals = []
        for c, cell in enumerate(row):
            if c == t:
                raw_targets.append(cell.strip())
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} as a number", r, c + 1) from None
        feats.append(vals)

    X = np.array(feats, dtype=float).reshape(len(rows), width - 1)
    if task == "classification":
        codes: dict[str, int] = {}
        y = np.array([codes.setdefault(v, len(codes)) for v in raw_targets], dtype=np.int64)
        return Dataset(X, y, "classification", max(2, len(codes)))
    if task != "regression":
        raise ConfigError(f"unknown task {task!r}")
    y = np.empty(len(raw_targets))
    for r, v in enumerate(raw_targets):
        try:
            y[r] = float(v)
        except ValueError:
            raise ParseError(f"cannot parse target {v!r} as a number", r + (2 if header else 1), t + 1) from None
    return Dataset(X, y, "regression")


def fingerprint(data: Dataset) -> dict:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.features).tobytes())
    h.update(np.ascontiguousarray(data.targets).tobytes())
    return {"rows": data.n, "cols": data.d, "task": data.task, "sha256": h.hexdigest()}


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    val_fraction_of_remainder: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for f in (self.test_fraction, self.val_fraction_of_remainder):
            if not 0.0 < f < 1.0:
                raise ConfigError(f"split fractions must lie in (0, 1), got {f}")


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def _floor(x: float) -> int:
    return math.floor(x + 1e-9)


def split_indices(n: int, spec: SplitSpec = SplitSpec()) -> SplitIndices:
    n_test = _floor(n * spec.test_fraction)
    n_val = _floor(spec.val_fraction_of_remainder * (n - n_test))
    n_train = n - n_test - n_val
    if min(n_test, n_val, n_train) < 1:
        raise ConfigError(f"n={n} gives an empty split (test {n_test}, validation {n_val}, train {n_train})")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return SplitIndices(train=perm[n_test + n_val:], validation=perm[n_test:n_test + n_val], test=perm[:n_test])


def split(data: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded (train, validation, test) partition: test first, then validation from the rest."""
    s = split_indices(data.n, spec)
    return data.take(s.train), data.take(s.validation), data.take(s.test)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        # constant columns map to zero
        sd = np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, 1.0)
        return cls(mean=mean, sd=sd)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.sd

    def apply(self, data: Dataset) -> Dataset:
        return Dataset(self.transform(data.features), data.targets, data.task, data.n_classes)


def standardize_splits(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Standardize every split with statistics fitted on ``train`` alone."""
    st = Standardizer.fit(train.features)
    return (st.apply(train),) + tuple(st.apply(o) for o in others)


def with_intercept(data: Dataset) -> Dataset:
    X = np.hstack([data.features, np.ones((data.n, 1))])
    return Dataset(X, data.targets, data.task, data.n_classes)


def gen_synthetic(kind: str, n: int, d: int, seed: int = 0, **params) -> Dataset:
    """Seeded synthetic datasets.

    outlier_regression: ``y = x.beta + noise``; a fraction ``outlier_fraction``
      (default 0.1) of points gets noise sd multiplied by ``outlier_scale``
      (default 10).
    hetero_regression: noise sd ``noise_sd * exp(hetero_scale * x_0)``.
    two_gaussians: two unit-covariance classes whose means are ``separation``
      apart; ``label_noise`` flips that fraction of labels.
    multiclass_blobs: ``n_classes`` centers drawn with sd ``separation``.
    """
    if n < 1 or d < 1:
        raise ConfigError("n and d must be >= 1")
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    rng = np.random.default_rng(seed)
    noise_sd = float(params.pop("noise_sd", 1.0))

    if kind == "outlier_regression":
        p = float(params.pop("outlier_fraction", 0.1))
        scale = float(params.pop("outlier_scale", 10.0))
        _no_extra(params)
        X = rng.standard_normal((n, d))
        beta = rng.standard_normal(d)
        sd = np.full(n, noise_sd)
        n_out = int(round(p * n))
        if n_out:
            sd[rng.choice(n, size=n_out, replace=False)] *= scale
        y = X @ beta + sd * rng.standard_normal(n)
        return Dataset(X, y, "regression")

    if kind == "hetero_regression":
        gamma = float(params.pop("hetero_scale", 2.0))
        _no_extra(params)
        X = rng.standard_normal((n, d))
        beta = rng.standard_normal(d)
        sd = noise_sd * np.exp(gamma * X[:, 0])
        y = X @ beta + sd * rng.standard_normal(n)
        return Dataset(X, y, "regression")

    if kind == "two_gaussians":
        sep = float(params.pop("separation", 2.0))
        flip = float(params.pop("label_noise", 0.0))
        _no_extra(params)
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        y = (np.arange(n) % 2).astype(np.int64)
        rng.shuffle(y)
        X = rng.standard_normal((n, d)) + np.outer(np.where(y == 1, 0.5, -0.5) * sep, direction)
        n_flip = int(round(flip * n))
        if n_flip:
            idx = rng.choice(n, size=n_flip, replace=False)
            y[idx] = 1 - y[idx]
        return Dataset(X, y, "classification", 2)

    k = int(params.pop("n_classes", 3))
    sep = float(params.pop("separation", 3.0))
    _no_extra(params)
    centers = sep * rng.standard_normal((k, d))
    y = rng.integers(0, k, size=n)
    X = centers[y] + rng.standard_normal((n, d))
    return Dataset(X, y, "classification", k)


def _no_extra(params: dict):
    if params:
        raise ConfigError(f"unexpected generator parameters: {sorted(params)}")
