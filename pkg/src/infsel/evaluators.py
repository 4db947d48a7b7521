"""Decision-tree ensembles (random forest, gradient boosting) and evaluation metrics.

Trees split by exhaustive scan over midpoints between sorted distinct feature
values. For regression the criterion is variance reduction; for class
probabilities it is Gini. Both reduce to maximizing
``|S_left|^2 / n_left + |S_right|^2 / n_right`` where ``S`` sums the target
rows (raw targets, one-hot labels, or boosting residuals), so one search serves
all cases. Ties go to the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.special import softmax

from .errors import ConfigError, ContractError
from .losskernels import Dataset

MODES = ("random_forest", "gradient_boosted")
METRICS = ("rmse", "accuracy", "logloss")


@dataclass(frozen=True)
class TreeEnsembleConfig:
    mode: str = "gradient_boosted"
    n_trees: int = 100
    max_features_fraction: float = 1.0
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    bootstrap: bool = False
    max_depth: int = 6
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown ensemble mode {self.mode!r}")
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if not 0.0 < self.max_features_fraction <= 1.0:
            raise ConfigError("max_features_fraction must lie in (0, 1]")
        if self.min_samples_split < 2:
            raise ConfigError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be >= 1")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def n_split_features(self, d: int) -> int:
        return max(1, int(self.max_features_fraction * d))


@dataclass
class Tree:
    feature: np.ndarray    # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (n_nodes, n_outputs)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=float))


def _best_split(X, Y, idx, feats, min_leaf):
    n = idx.size
    Xn = X[np.ix_(idx, feats)]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    Ys = Y[idx][order]                          # (n, F, out)
    S_left = np.cumsum(Ys, axis=0)[:-1]
    total = S_left[-1] + Ys[-1]
    n_left = np.arange(1, n, dtype=float)[:, None]
    n_right = n - n_left
    score = (S_left ** 2).sum(-1) / n_left + ((total - S_left) ** 2).sum(-1) / n_right
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf).T   # (F, n-1): row-major flatten = feature, then threshold
    flat = int(np.argmax(score))
    fi, pos = divmod(flat, n - 1)
    parent = float((total[0] ** 2).sum()) / n
    gain = score[fi, pos] - parent
    if not gain > 1e-12 * max(1.0, abs(parent)):
        return None
    lo, hi = xs[pos, fi], xs[pos + 1, fi]
    thr = 0.5 * (lo + hi)
    if thr >= hi:
        thr = lo
    return int(feats[fi]), float(thr)


def build_tree(X: np.ndarray, Y: np.ndarray, max_depth: int, min_samples_split: int, min_samples_leaf: int,
               n_split_features: int | None = None, rng: np.random.Generator | None = None,
               features: np.ndarray | None = None) -> Tree:
    """Grow one tree on rows of ``X`` with (n, n_outputs) targets ``Y``.

    ``features`` restricts the whole tree to a column subset; ``n_split_features``
    draws that many columns afresh at each split.
    """
    n, d = X.shape
    if Y.ndim == 1:
        Y = Y[:, None]
    base_feats = np.arange(d) if features is None else np.sort(np.asarray(features))
    feat, thr, left, right, value = [], [], [], [], []

    def new_node(idx):
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(Y[idx].mean(axis=0))
        return len(feat) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.size < min_samples_split or idx.size < 2 * min_samples_leaf:
            continue
        feats = base_feats
        if n_split_features is not None and n_split_features < base_feats.size:
            feats = np.sort(rng.choice(base_feats, size=n_split_features, replace=False))
        found = _best_split(X, Y, idx, feats, min_samples_leaf)
        if found is None:
            continue
        f, t = found
        mask = X[idx, f] <= t
        li, ri = idx[mask], idx[~mask]
        feat[node], thr[node] = f, t
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(np.array(feat, dtype=np.int64), np.array(thr, dtype=float), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value, dtype=float).reshape(len(feat), Y.shape[1]))


@dataclass
class TreeEnsemble:
    config: TreeEnsembleConfig
    task: str
    n_features: int
    n_classes: int | None
    trees: list[Tree]
    base: np.ndarray

    def raw_predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2 and X.shape[0] == 0:
            return np.zeros((0, self.base.size))
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ContractError(f"expected (n, {self.n_features}) features, got {X.shape}")
        if self.config.mode == "random_forest":
            return np.mean([t.predict(X) for t in self.trees], axis=0)
        out = np.tile(self.base, (X.shape[0], 1))
        for t in self.trees:
            out += self.config.learning_rate * t.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        """Regression: values. Classification: class-probability matrix."""
        raw = self.raw_predict(X)
        if self.task == "regression":
            return raw[:, 0]
        if self.config.mode == "gradient_boosted":
            return softmax(raw, axis=1)
        return raw

    def predict_labels(self, X) -> np.ndarray:
        return np.argmax(self.predict(X), axis=1)

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "task": self.task, "n_features": self.n_features,
                "n_classes": self.n_classes, "base": self.base.tolist(), "trees": [t.to_dict() for t in self.trees]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        return cls(TreeEnsembleConfig(**d["config"]), d["task"], d["n_features"], d["n_classes"],
                   [Tree.from_dict(t) for t in d["trees"]], np.array(d["base"], dtype=float))


def _targets(data: Dataset, idx: np.ndarray) -> np.ndarray:
    if data.task == "regression":
        return data.targets[idx].astype(float)[:, None]
    return np.eye(data.n_classes)[data.targets[idx]]


def fit_tree_ensemble(cfg: TreeEnsembleConfig, data: Dataset, subset=None) -> TreeEnsemble:
    """Fit a random forest or a gradient-boosted ensemble on ``data[subset]``."""
    idx = np.arange(data.n) if subset is None else np.asarray(subset, dtype=np.int64)
    if idx.size < 1:
        raise ContractError("subset is empty")
    X = data.features[idx]
    Y = _targets(data, idx)
    n, d = X.shape
    k_split = cfg.n_split_features(d)
    trees: list[Tree] = []

    if cfg.mode == "random_forest":
        for t in range(cfg.n_trees):
            rng = np.random.default_rng([cfg.seed, t])
            rows = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
            trees.append(build_tree(X[rows], Y[rows], cfg.max_depth, cfg.min_samples_split, cfg.min_samples_leaf,
                                    n_split_features=k_split, rng=rng))
        base = np.zeros(Y.shape[1])
    else:
        if data.task == "regression":
            base = Y.mean(axis=0)
        else:
            prior = np.clip(Y.mean(axis=0), 1e-12, None)
            base = np.log(prior)
        F = np.tile(base, (n, 1))
        for t in range(cfg.n_trees):
            rng = np.random.default_rng([cfg.seed, t])
            resid = Y - (F if data.task == "regression" else softmax(F, axis=1))
            feats = None
            if k_split < d:
                feats = rng.choice(d, size=k_split, replace=False)
            rows = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
            tree = build_tree(X[rows], resid[rows], cfg.max_depth, cfg.min_samples_split, cfg.min_samples_leaf,
                              features=feats)
            trees.append(tree)
            F = F + cfg.learning_rate * tree.predict(X)
    return TreeEnsemble(cfg, data.task, d, data.n_classes, trees, base)


def predict(ensemble: TreeEnsemble, features) -> np.ndarray:
    return ensemble.predict(features)


def evaluate(predictions, targets, metric: str) -> float:
    """rmse on values; accuracy and logloss on class probabilities.

    One-dimensional probability predictions are read as P(class 1).
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets)
    if p.shape[0] != t.shape[0]:
        raise ContractError(f"{p.shape[0]} predictions for {t.shape[0]} targets")
    if t.shape[0] < 1:
        raise ContractError("need at least one prediction")
    if metric == "rmse":
        return float(np.sqrt(np.mean((p - t.astype(float)) ** 2)))
    labels = t.astype(np.int64)
    if metric == "accuracy":
        pred = np.argmax(p, axis=1) if p.ndim == 2 else (p >= 0.5).astype(np.int64)
        return float(np.mean(pred == labels))
    if p.ndim == 1:
        p = np.column_stack([1.0 - p, p])
    probs = np.clip(p[np.arange(len(labels)), labels], 1e-12, 1 - 1e-12)
    return float(-np.mean(np.log(probs)))


def with_overrides(cfg: TreeEnsembleConfig, **kw) -> TreeEnsembleConfig:
    return replace(cfg, **kw)
