"""Numerical property suites.

Each suite draws its own seeded instances and returns a ``PropertyResult``
with the measured statistics. ``quick=True`` shrinks instance counts for
smoke runs; the thresholds stay the same.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .influence import bif_single, first_order_update, residual_score_vector
from .losskernels import Dataset, LossKernel, fit_erm, grad, hess_vec, loss
from .numkit import LinearOperator, cg_solve, cholesky_solve
from .selector import compute_deltas, exhaustive_values, validation_objective


@dataclass
class PropertyResult:
    name: str
    passed: bool
    stats: dict = field(default_factory=dict)
    quick: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid_labels(rng, X, beta) -> np.ndarray:
    return (rng.random(X.shape[0]) < 1.0 / (1.0 + np.exp(-X @ beta))).astype(np.int64)


def _random_instance(kind: str, rng, n: int, d: int, k: int = 3) -> tuple[LossKernel, Dataset]:
    X = rng.standard_normal((n, d))
    if kind == "squared":
        return LossKernel("squared", d), Dataset(X, X @ rng.standard_normal(d) + rng.standard_normal(n))
    if kind == "logistic":
        return LossKernel("logistic", d), Dataset(X, _sigmoid_labels(rng, X, rng.standard_normal(d)),
                                                  "classification", 2)
    logits = X @ rng.standard_normal((d, k))
    y = np.array([rng.choice(k, p=p) for p in np.exp(logits) / np.exp(logits).sum(1, keepdims=True)])
    return LossKernel("softmax", d, n_classes=k), Dataset(X, y, "classification", k)


# first-order update properties -----------------------------------------------------------

def quadratic_exactness(quick: bool = False, seed: int = 0, tol: float = 1e-9) -> dict:
    """Unregularized squared loss on a constant feature: the linearization is the refit."""
    rng = np.random.default_rng(seed)
    n_inst = 20 if quick else 100
    worst = 0.0
    kernel = LossKernel("squared", 1, lam=0.0)
    for _ in range(n_inst):
        M, m = int(rng.integers(10, 201)), int(rng.integers(1, 11))
        c = rng.uniform(0.5, 3.0)
        y = rng.normal(0.0, 5.0, M + m)
        data = Dataset(np.full((M + m, 1), c), y)
        model = fit_erm(kernel, data, range(M))
        approx = first_order_update(model, data.features[M:], y[M:])
        exact = fit_erm(kernel, data, range(M + m), init=model.theta).theta
        worst = max(worst, float(np.max(np.abs(approx - exact))))
    return {"passed": worst <= tol, "stats": {"instances": n_inst, "max_abs_diff": worst, "tolerance": tol}}


def update_error_slope(quick: bool = False, seed: int = 0, threshold: float = -1.6,
                       sizes: tuple[int, ...] = (50, 100, 200, 400)) -> dict:
    """Log-log slope of the single-point update error against the base subset size."""
    d = 5
    beta = np.random.default_rng(seed).standard_normal(d)
    kernel = LossKernel("logistic", d)
    reps, per_rep = (2, 10) if quick else (5, 50)
    errors = []
    for M in sizes:
        errs = []
        for rep in range(reps):
            rng = np.random.default_rng([seed, M, rep])
            X = rng.standard_normal((M + per_rep, d))
            data = Dataset(X, _sigmoid_labels(rng, X, beta), "classification", 2)
            model = fit_erm(kernel, data, range(M))
            for j in range(M, M + per_rep):
                approx = first_order_update(model, X[j], data.targets[j])
                exact = fit_erm(kernel, data, list(range(M)) + [j], init=model.theta).theta
                errs.append(float(np.linalg.norm(approx - exact)))
        errors.append(float(np.mean(errs)))
    slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    return {"passed": slope <= threshold,
            "stats": {"slope": slope, "threshold": threshold, "sizes": list(sizes), "mean_errors": errors,
                      "added_points_per_size": reps * per_rep}}


def batch_additivity(quick: bool = False, seed: int = 0, tol: float = 1e-10) -> dict:
    """``(M + m) * (theta_batch - theta_hat)`` equals the summed single-point influences."""
    rng = np.random.default_rng(seed)
    n_inst = 20 if quick else 100
    worst = 0.0
    for t in range(n_inst):
        kind = ("squared", "logistic", "softmax")[t % 3]
        M, m, d = int(rng.integers(10, 80)), int(rng.integers(1, 11)), int(rng.integers(1, 6))
        kernel, data = _random_instance(kind, rng, M + m, d)
        model = fit_erm(kernel, data, range(M))
        X_new, y_new = data.features[M:], data.targets[M:]
        lhs = (M + m) * (first_order_update(model, X_new, y_new) - model.theta)
        rhs = sum(bif_single(model, X_new[j], y_new[j]) for j in range(m))
        scale = max(1.0, float(np.max(np.abs(rhs))))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))) / scale)
    return {"passed": worst <= tol, "stats": {"instances": n_inst, "max_rel_diff": worst, "tolerance": tol}}


# selection properties --------------------------------------------------------------------

def oracle_instance(seed: int, d: int = 5, M: int = 60, pool: int = 30,
                    n_val: int = 200) -> tuple[LossKernel, Dataset, Dataset]:
    """Logistic data with Gaussian features and a standard normal coefficient vector.

    The first ``M`` pool rows are the fitted subset, the remaining ``pool``
    rows are candidates.
    """
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(d)
    X = rng.standard_normal((M + pool + n_val, d))
    y = _sigmoid_labels(rng, X, beta)
    train = Dataset(X[:M + pool], y[:M + pool], "classification", 2)
    val = Dataset(X[M + pool:], y[M + pool:], "classification", 2)
    return LossKernel("logistic", d), train, val


def oracle_agreement(quick: bool = False, seed: int = 0, top1_min: float = 0.90, top3_min: float = 0.99,
                     M: int = 60, pool: int = 30) -> dict:
    """How often the influence argmax is the exact-refit best (top-1) or among its best three."""
    n_inst = 20 if quick else 100
    top1 = top3 = 0
    ranks = []
    for t in range(n_inst):
        kernel, train, val = oracle_instance(seed * 100_003 + t, M=M, pool=pool)
        obj = validation_objective(kernel, val)
        subset = list(range(M))
        combos, values = exhaustive_values(kernel, train, subset, obj, m=1)
        exact_order = [combos[i][0] for i in np.argsort(values, kind="stable")]
        model = fit_erm(kernel, train, subset)
        cands = np.arange(M, M + pool)
        scores = residual_score_vector(model, obj.gradient(model.theta), train, cands)
        pick = int(cands[np.argsort(-scores, kind="stable")[0]])
        rank = exact_order.index(pick)
        ranks.append(rank)
        top1 += rank == 0
        top3 += rank < 3
    r1, r3 = top1 / n_inst, top3 / n_inst
    return {"passed": r1 >= top1_min and r3 >= top3_min,
            "stats": {"instances": n_inst, "top1": r1, "top3": r3, "top1_min": top1_min, "top3_min": top3_min,
                      "mean_oracle_rank_of_pick": float(np.mean(ranks))}}


def delta_ordering(quick: bool = False, seed: int = 0) -> dict:
    """Exact-refit gaps satisfy ``delta'' <= delta' <= 0`` with no tolerance."""
    rng = np.random.default_rng(seed)
    n_inst = 20 if quick else 100
    violations = []
    for t in range(n_inst):
        kind = ("squared", "logistic", "softmax")[t % 3]
        M, extra, d = int(rng.integers(8, 25)), int(rng.integers(2, 9)), int(rng.integers(1, 4))
        m = 1 if t % 2 == 0 else 2
        kernel, data = _random_instance(kind, rng, M + extra + 20, d)
        pool, val = data.take(np.arange(M + extra)), data.take(np.arange(M + extra, data.n))
        rep = compute_deltas(kernel, pool, list(range(M)), validation_objective(kernel, val), m=m)
        if not rep.delta_double_prime <= rep.delta_prime <= 0.0:
            violations.append({"instance": t, "delta_prime": rep.delta_prime,
                               "delta_double_prime": rep.delta_double_prime})
    return {"passed": not violations, "stats": {"instances": n_inst, "violations": violations}}


# derivative and solver checks ------------------------------------------------------------

def derivative_checks(quick: bool = False, seed: int = 0, grad_rtol: float = 1e-5, hvp_tol: float = 1e-4) -> dict:
    """Central finite differences of loss (for grad) and of grad (for hess_vec), all kernels."""
    rng = np.random.default_rng(seed)
    draws = 20 if quick else 100
    stats: dict = {}
    ok = True
    for kind in ("squared", "logistic", "softmax"):
        worst_g = worst_h = 0.0
        for _ in range(draws):
            d = int(rng.integers(1, 6))
            kernel, data = _random_instance(kind, rng, 1, d)
            kernel = LossKernel(kernel.kind, d, lam=float(rng.uniform(0.0, 1.0)), n_classes=kernel.n_classes)
            z = (data.features[0], data.targets[0])
            theta = rng.standard_normal(kernel.dim)
            g = grad(kernel, z, theta)
            fd = np.empty_like(theta)
            for i in range(theta.size):
                h = 1e-5 * (1.0 + abs(theta[i]))
                e = np.zeros_like(theta)
                e[i] = h
                fd[i] = (loss(kernel, z, theta + e) - loss(kernel, z, theta - e)) / (2 * h)
            worst_g = max(worst_g, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))

            sub = _random_instance(kind, rng, int(rng.integers(1, 20)), d)[1]
            v = rng.standard_normal(kernel.dim)
            h = 1e-5
            fd_h = (kernel.gradient(sub.features, sub.targets, theta + h * v)
                    - kernel.gradient(sub.features, sub.targets, theta - h * v)) / (2 * h)
            hv = hess_vec(kernel, sub, theta, v)
            worst_h = max(worst_h, float(np.linalg.norm(hv - fd_h) / np.linalg.norm(v)))
        stats[kind] = {"grad_max_rel_err": worst_g, "hvp_max_err_per_norm": worst_h}
        ok &= worst_g <= grad_rtol and worst_h <= hvp_tol
    stats.update(draws_per_kernel=draws, grad_rtol=grad_rtol, hvp_tol=hvp_tol)
    return {"passed": ok, "stats": stats}


def cg_vs_cholesky(quick: bool = False, seed: int = 0, tol: float = 1e-6) -> dict:
    """CG and Cholesky agree on random SPD systems ``M^T M + I`` up to dimension 50."""
    rng = np.random.default_rng(seed)
    n_inst = 20 if quick else 100
    worst = 0.0
    unconverged = 0
    for _ in range(n_inst):
        n = int(rng.integers(1, 51))
        B = rng.standard_normal((n, n))
        A = B.T @ B + np.eye(n)
        b = rng.standard_normal(n)
        res = cg_solve(LinearOperator.from_matrix(A), b, tol=1e-12)
        unconverged += not res.converged
        worst = max(worst, float(np.max(np.abs(res.x - cholesky_solve(A, b)))))
    return {"passed": worst <= tol, "stats": {"instances": n_inst, "max_abs_diff": worst, "tolerance": tol,
                                              "cg_unconverged": unconverged}}


PROPERTIES: dict[str, Callable[..., dict]] = {
    "quadratic_exactness": quadratic_exactness,
    "update_error_slope": update_error_slope,
    "batch_additivity": batch_additivity,
    "oracle_agreement": oracle_agreement,
    "delta_ordering": delta_ordering,
    "derivative_checks": derivative_checks,
    "cg_vs_cholesky": cg_vs_cholesky,
}


def run_property(name: str, quick: bool = False, seed: int = 0) -> PropertyResult:
    t0 = time.perf_counter()
    out = PROPERTIES[name](quick=quick, seed=seed)
    return PropertyResult(name, bool(out["passed"]), out["stats"], quick, time.perf_counter() - t0)
