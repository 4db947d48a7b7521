"""Influence-function approximations of refitting after adding training points.

All updates are linearizations at the fitted parameter of a model trained on
``M`` points. Adding ``m`` points changes the parameter by approximately
``-(1 / (M + m)) * sum_j H^{-1} grad_j`` where ``H`` is the subset-mean
Hessian; the corresponding loss change follows by the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .losskernels import Dataset, FittedModel, HinvApplier

__all__ = [
    "HinvApplier",
    "ResidualScore",
    "bif_single",
    "first_order_update",
    "predict_loss_change",
    "residual_scores",
    "residual_score_vector",
]


@dataclass(frozen=True)
class ResidualScore:
    candidate_index: int
    score: float


def _as_points(model: FittedModel, X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    if X.shape[1] != model.kernel.n_features:
        raise ContractError(f"points have {X.shape[1]} features, model expects {model.kernel.n_features}")
    if X.shape[0] != y.shape[0]:
        raise ContractError("feature rows and targets differ in length")
    return X, y


def bif_single(model: FittedModel, x, y) -> np.ndarray:
    """Influence of one point on the fitted parameter: ``-H^{-1} grad l(z, theta_hat)``."""
    X, Y = _as_points(model, x, y)
    g = model.kernel.point_grads(X, Y, model.theta)[0]
    return -model.hessian_solver.apply(g)


def first_order_update(model: FittedModel, X_new, y_new) -> np.ndarray:
    """First-order estimate of the parameter after refitting with the new points added."""
    X, Y = _as_points(model, X_new, y_new)
    m = X.shape[0]
    if m < 1:
        raise ContractError("need at least one new point")
    g_sum = model.kernel.point_grads(X, Y, model.theta).sum(axis=0)
    return model.theta - model.hessian_solver.apply(g_sum) / (model.M + m)


def predict_loss_change(model: FittedModel, probe, X_new, y_new) -> float:
    """First-order estimate of ``loss(probe, theta_new) - loss(probe, theta_hat)``."""
    X, Y = _as_points(model, X_new, y_new)
    m = X.shape[0]
    if m < 1:
        raise ContractError("need at least one new point")
    px, py = _as_points(model, probe[0], probe[1])
    g_probe = model.kernel.point_grads(px, py, model.theta)[0]
    g_sum = model.kernel.point_grads(X, Y, model.theta).sum(axis=0)
    return -float(g_probe @ model.hessian_solver.apply(g_sum)) / (model.M + m)


def residual_score_vector(model: FittedModel, objective_grad: np.ndarray, pool: Dataset,
                          candidates: Sequence[int]) -> np.ndarray:
    """Scores ``grad R^T H^{-1} grad l(z_i)`` for pool candidates.

    The Hessian is solved once against the objective gradient, so each
    candidate costs one gradient and one dot product.
    """
    idx = np.asarray(candidates, dtype=np.int64)
    if idx.size == 0:
        return np.zeros(0)
    v = model.hessian_solver.apply(np.asarray(objective_grad, dtype=float))
    G = model.kernel.point_grads(pool.features[idx], pool.targets[idx], model.theta)
    return G @ v


def residual_scores(model: FittedModel, validation: Dataset, pool: Dataset,
                    candidates: Sequence[int]) -> list[ResidualScore]:
    """Greedy ranking scores against the mean validation loss; larger is better."""
    if validation.n == 0:
        raise ContractError("validation set is empty")
    val_grad = model.kernel.gradient(validation.features, validation.targets, model.theta)
    scores = residual_score_vector(model, val_grad, pool, candidates)
    return [ResidualScore(int(i), float(s)) for i, s in zip(candidates, scores)]
