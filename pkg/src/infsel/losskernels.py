"""Per-point convex losses with exact derivatives, and a damped Newton ERM solver.

Every kernel carries an L2 term ``(lam / 2) * ||theta||^2`` inside the
per-point loss, so the subset-mean objective, its gradient and its Hessian all
include the regularizer exactly once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import ContractError, ConvergenceError, DecompositionError, EmptyDatasetError, SizeError
from .numkit import CholeskyFactor, LinearOperator, cg_solve, cholesky

logger = logging.getLogger(__name__)

KINDS = ("squared", "logistic", "softmax")
DEFAULT_LAMBDA = 1e-4
DENSE_THRESHOLD = 512


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus targets; ``task`` is ``"regression"`` or ``"classification"``."""

    features: np.ndarray
    targets: np.ndarray
    task: str = "regression"
    n_classes: int | None = None

    def __post_init__(self):
        X = np.array(self.features, dtype=float, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] < 1:
            raise EmptyDatasetError("dataset has no rows")
        if not np.all(np.isfinite(X)):
            raise ContractError("features contain NaN or infinite entries")
        if self.task == "regression":
            y = np.array(self.targets, dtype=float, copy=True)
            if not np.all(np.isfinite(y)):
                raise ContractError("targets contain NaN or infinite entries")
            k = None
        elif self.task == "classification":
            y = np.array(self.targets, copy=True)
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ContractError("classification labels must be integers")
            y = y.astype(np.int64)
            k = self.n_classes if self.n_classes is not None else int(y.max()) + 1
            if k < 2:
                k = 2
            if y.min() < 0 or y.max() >= k:
                raise ContractError(f"classification labels must lie in [0, {k})")
        else:
            raise ContractError(f"unknown task {self.task!r}")
        if y.shape != (X.shape[0],):
            raise ContractError(f"targets shape {y.shape} does not match {X.shape[0]} rows")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "n_classes", k)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx], self.task, self.n_classes)


@dataclass(frozen=True)
class LossKernel:
    """A differentiable per-point loss.

    ``squared`` and ``logistic`` have ``n_features`` parameters; ``softmax``
    has ``n_classes * n_features`` parameters laid out class-major. Logistic
    labels may be given as {0, 1} or {-1, +1}.
    """

    kind: str
    n_features: int
    lam: float = DEFAULT_LAMBDA
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown kernel kind {self.kind!r}")
        if self.lam < 0:
            raise ContractError("lam must be non-negative")
        if self.kind == "softmax" and (self.n_classes is None or self.n_classes < 2):
            raise ContractError("softmax kernel needs n_classes >= 2")

    @classmethod
    def for_dataset(cls, data: Dataset, lam: float = DEFAULT_LAMBDA) -> "LossKernel":
        if data.task == "regression":
            return cls("squared", data.d, lam)
        if data.n_classes == 2:
            return cls("logistic", data.d, lam)
        return cls("softmax", data.d, lam, data.n_classes)

    @property
    def dim(self) -> int:
        if self.kind == "softmax":
            return self.n_classes * self.n_features
        return self.n_features

    def _check(self, X: np.ndarray, theta: np.ndarray):
        if theta.shape != (self.dim,):
            raise ContractError(f"theta has shape {theta.shape}, kernel dim is {self.dim}")
        if X.shape[1] != self.n_features:
            raise ContractError(f"points have {X.shape[1]} features, kernel expects {self.n_features}")

    @staticmethod
    def _signs(y: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(y) > 0, 1.0, -1.0)

    # vectorized per-point evaluations -------------------------------------------------

    def point_losses(self, X, y, theta) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.asarray(theta, dtype=float)
        self._check(X, theta)
        reg = 0.5 * self.lam * float(theta @ theta)
        if self.kind == "squared":
            r = X @ theta - np.asarray(y, dtype=float)
            base = 0.5 * r * r
        elif self.kind == "logistic":
            base = -log_expit(self._signs(y) * (X @ theta))
        else:
            logits = X @ theta.reshape(self.n_classes, self.n_features).T
            yi = np.asarray(y, dtype=np.int64)
            base = logsumexp(logits, axis=1) - logits[np.arange(len(yi)), yi]
            base = np.maximum(base, 0.0)
        return base + reg

    def point_grads(self, X, y, theta) -> np.ndarray:
        """Rows are per-point gradients, regularizer included."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.asarray(theta, dtype=float)
        self._check(X, theta)
        if self.kind == "squared":
            r = X @ theta - np.asarray(y, dtype=float)
            G = r[:, None] * X
        elif self.kind == "logistic":
            s = self._signs(y)
            G = (-s * expit(-s * (X @ theta)))[:, None] * X
        else:
            k, d = self.n_classes, self.n_features
            P = softmax(X @ theta.reshape(k, d).T, axis=1)
            P[np.arange(X.shape[0]), np.asarray(y, dtype=np.int64)] -= 1.0
            G = (P[:, :, None] * X[:, None, :]).reshape(X.shape[0], k * d)
        return G + self.lam * theta

    def hess_vec(self, X, y, theta, v) -> np.ndarray:
        """Subset-averaged regularized Hessian applied to ``v``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.asarray(theta, dtype=float)
        v = np.asarray(v, dtype=float)
        self._check(X, theta)
        if X.shape[0] == 0:
            raise ContractError("Hessian of an empty subset is undefined")
        if v.shape != (self.dim,):
            raise ContractError(f"v has shape {v.shape}, kernel dim is {self.dim}")
        n = X.shape[0]
        if self.kind == "squared":
            out = X.T @ (X @ v) / n
        elif self.kind == "logistic":
            p = expit(X @ theta)
            out = X.T @ (p * (1 - p) * (X @ v)) / n
        else:
            k, d = self.n_classes, self.n_features
            P = softmax(X @ theta.reshape(k, d).T, axis=1)
            U = X @ v.reshape(k, d).T
            S = P * U - P * np.sum(P * U, axis=1, keepdims=True)
            out = (S.T @ X).ravel() / n
        return out + self.lam * v

    def hessian(self, X, y, theta) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        theta = np.asarray(theta, dtype=float)
        self._check(X, theta)
        if X.shape[0] == 0:
            raise ContractError("Hessian of an empty subset is undefined")
        n = X.shape[0]
        if self.kind == "squared":
            H = X.T @ X / n
        elif self.kind == "logistic":
            p = expit(X @ theta)
            H = (X * (p * (1 - p))[:, None]).T @ X / n
        else:
            k, d = self.n_classes, self.n_features
            P = softmax(X @ theta.reshape(k, d).T, axis=1)
            H = np.zeros((k * d, k * d))
            for a in range(k):
                for b in range(a, k):
                    w = P[:, a] * ((a == b) - P[:, b])
                    block = (X * w[:, None]).T @ X / n
                    H[a * d:(a + 1) * d, b * d:(b + 1) * d] = block
                    if a != b:
                        H[b * d:(b + 1) * d, a * d:(a + 1) * d] = block.T
        H = 0.5 * (H + H.T)
        H[np.diag_indices_from(H)] += self.lam
        return H

    # subset-mean objective ------------------------------------------------------------

    def objective(self, X, y, theta) -> float:
        return float(np.mean(self.point_losses(X, y, theta)))

    def gradient(self, X, y, theta) -> np.ndarray:
        return self.point_grads(X, y, theta).mean(axis=0)


def _point(z):
    x, y = z
    return np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_1d(y)


def loss(kernel: LossKernel, z, theta) -> float:
    """Regularized loss of one datapoint ``z = (x, y)``."""
    X, y = _point(z)
    return float(kernel.point_losses(X, y, theta)[0])


def grad(kernel: LossKernel, z, theta) -> np.ndarray:
    X, y = _point(z)
    return kernel.point_grads(X, y, theta)[0]


def hess_vec(kernel: LossKernel, subset: Dataset, theta, v) -> np.ndarray:
    return kernel.hess_vec(subset.features, subset.targets, theta, v)


def full_hessian(kernel: LossKernel, subset: Dataset, theta, max_dim: int = DENSE_THRESHOLD) -> np.ndarray:
    if kernel.dim > max_dim:
        raise SizeError(f"parameter dim {kernel.dim} exceeds dense threshold {max_dim}; use the CG path (hess_vec)")
    return kernel.hessian(subset.features, subset.targets, theta)


class HinvApplier:
    """Applies the inverse of the subset-mean Hessian at a fixed parameter.

    ``direct`` mode caches a Cholesky factor; ``cg`` mode runs conjugate
    gradient against Hessian-vector products for every right-hand side.
    """

    def __init__(self, kernel: LossKernel, X: np.ndarray, y: np.ndarray, theta: np.ndarray,
                 mode: str | None = None, dense_threshold: int = DENSE_THRESHOLD, cg_tol: float = 1e-10):
        self.kernel = kernel
        self.X, self.y, self.theta = X, y, theta
        self.mode = mode or ("direct" if kernel.dim <= dense_threshold else "cg")
        self.cg_tol = cg_tol
        self._factor: CholeskyFactor | None = None
        if self.mode not in ("direct", "cg"):
            raise ContractError(f"unknown Hessian solve mode {self.mode!r}")

    @property
    def factor(self) -> CholeskyFactor | None:
        if self.mode == "direct" and self._factor is None:
            self._factor = cholesky(self.kernel.hessian(self.X, self.y, self.theta))
        return self._factor

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def hvp(self, v: np.ndarray) -> np.ndarray:
        return self.kernel.hess_vec(self.X, self.y, self.theta, v)

    def apply(self, b: np.ndarray) -> np.ndarray:
        """Return ``H^{-1} b``; a 2-D ``b`` is solved column by column."""
        b = np.asarray(b, dtype=float)
        if self.mode == "direct":
            return self.factor.solve(b)
        if b.ndim == 2:
            return np.column_stack([self.apply(b[:, j]) for j in range(b.shape[1])])
        res = cg_solve(LinearOperator(self.dim, self.hvp), b, tol=self.cg_tol, max_iter=10 * self.dim)
        if not res.converged:
            logger.warning("CG Hessian solve stopped at residual %.3e", res.residual_norm)
        return res.x


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-9
    max_iter: int = 100
    armijo: float = 1e-4
    dense_threshold: int = DENSE_THRESHOLD


@dataclass(frozen=True, eq=False)
class FittedModel:
    kernel: LossKernel
    theta: np.ndarray
    subset: tuple[int, ...]
    data: Dataset = field(repr=False)
    hessian_solver: HinvApplier = field(repr=False)
    grad_norm_at_fit: float
    newton_steps: int = 0

    @property
    def M(self) -> int:
        return len(self.subset)


def _newton_direction(kernel, X, y, theta, g, cfg: SolverConfig) -> np.ndarray:
    if kernel.dim <= cfg.dense_threshold:
        H = kernel.hessian(X, y, theta)
        try:
            return -cholesky(H).solve(g, refine=False)
        except DecompositionError:
            # singular Hessian only arises with lam = 0; least squares still gives a descent step
            return -np.linalg.lstsq(H, g, rcond=None)[0]
    gn = float(np.linalg.norm(g))
    forcing = min(0.5, np.sqrt(gn))
    op = LinearOperator(kernel.dim, lambda v: kernel.hess_vec(X, y, theta, v))
    return -cg_solve(op, g, tol=max(forcing, 1e-12), max_iter=10 * kernel.dim).x


def fit_erm(kernel: LossKernel, data: Dataset, subset: Sequence[int], init=None,
            cfg: SolverConfig = SolverConfig()) -> FittedModel:
    """Minimize the subset-mean regularized loss by damped Newton with Armijo backtracking."""
    subset = tuple(int(i) for i in subset)
    if not subset:
        raise ContractError("cannot fit on an empty subset")
    if len(set(subset)) != len(subset):
        raise ContractError("subset indices must be unique")
    idx = np.asarray(subset, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= data.n:
        raise ContractError("subset index out of range")
    X, y = data.features[idx], data.targets[idx]
    theta = np.zeros(kernel.dim) if init is None else np.array(init, dtype=float)
    if theta.shape != (kernel.dim,):
        raise ContractError(f"init has shape {theta.shape}, kernel dim is {kernel.dim}")

    f = kernel.objective(X, y, theta)
    g = kernel.gradient(X, y, theta)
    gn = float(np.linalg.norm(g))
    steps = 0
    while gn > cfg.tol:
        if steps >= cfg.max_iter:
            raise ConvergenceError(f"Newton solver did not converge in {cfg.max_iter} steps", gn)
        p = _newton_direction(kernel, X, y, theta, g, cfg)
        slope = float(g @ p)
        if slope >= 0:
            p, slope = -g, -gn * gn
        t = 1.0
        while True:
            cand = theta + t * p
            f_new = kernel.objective(X, y, cand)
            if f_new <= f + cfg.armijo * t * slope:
                break
            if -slope * t <= 1e-13 * max(1.0, abs(f)):
                # decrease is below float resolution of the objective; the full Newton step is safe here
                cand = theta + p
                f_new = kernel.objective(X, y, cand)
                break
            t *= 0.5
        theta, f = cand, f_new
        g = kernel.gradient(X, y, theta)
        gn = float(np.linalg.norm(g))
        steps += 1
        if not np.all(np.isfinite(theta)):
            raise ConvergenceError("Newton iterate became non-finite", gn)

    solver = HinvApplier(kernel, X, y, theta, dense_threshold=cfg.dense_threshold)
    return FittedModel(kernel=kernel, theta=theta, subset=subset, data=data, hessian_solver=solver,
                       grad_norm_at_fit=gn, newton_steps=steps)
