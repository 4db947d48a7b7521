"""Small dense linear algebra kernel: SPD direct solves and conjugate gradient."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, lapack

from .errors import ContractError, DecompositionError, NumericBreakdownError

SYMMETRY_TOL = 1e-9
DEFAULT_CG_TOL = 1e-8


def as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError("matrix has non-finite entries")
    return A


def is_symmetric(A: np.ndarray, tol: float = SYMMETRY_TOL) -> bool:
    return A.shape[0] == A.shape[1] and float(np.max(np.abs(A - A.T), initial=0.0)) <= tol


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower Cholesky factor of an SPD matrix, reusable across right-hand sides."""

    lower: np.ndarray
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray, refine: bool = True) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.dim:
            raise ContractError(f"right-hand side has length {b.shape[0]}, matrix has dim {self.dim}")
        x = cho_solve((self.lower, True), b)
        if refine:
            # one step of iterative refinement keeps the residual near machine precision
            x = x + cho_solve((self.lower, True), b - self.matrix @ x)
        return x


def cholesky(A, sym_tol: float = SYMMETRY_TOL) -> CholeskyFactor:
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ContractError(f"matrix must be square, got {A.shape}")
    if not is_symmetric(A, sym_tol):
        raise ContractError("matrix is not symmetric within tolerance")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise DecompositionError(pivot=int(info) - 1)
    if info < 0:
        raise ContractError(f"LAPACK dpotrf rejected argument {-info}")
    return CholeskyFactor(lower=c, matrix=A)


def cholesky_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A``.

    Raises DecompositionError naming the first non-positive pivot when ``A`` is
    not positive definite.
    """
    A = as_matrix(A)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.shape[0]:
        raise ContractError(f"dimension mismatch: A is {A.shape}, b has length {b.shape[0]}")
    return cholesky(A).solve(b)


@dataclass(frozen=True)
class LinearOperator:
    """A square linear map given only through its action on vectors."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v: np.ndarray) -> np.ndarray:
        out = np.asarray(self.apply(v), dtype=float)
        if out.shape != (self.dim,):
            raise ContractError(f"operator returned shape {out.shape}, expected ({self.dim},)")
        return out

    @classmethod
    def from_matrix(cls, A) -> "LinearOperator":
        A = as_matrix(A)
        return cls(dim=A.shape[0], apply=lambda v: A @ v)


@dataclass(frozen=True)
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def cg_solve(A: LinearOperator, b, tol: float = DEFAULT_CG_TOL, max_iter: int | None = None) -> CGResult:
    """Unpreconditioned conjugate gradient for an SPD operator.

    Stops when ``||b - A x||_2 <= tol * ||b||_2``. If ``max_iter`` (default
    ``10 * dim``) runs out first, the best iterate is returned with
    ``converged=False``.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    b = np.asarray(b, dtype=float)
    if b.shape != (A.dim,):
        raise ContractError(f"b has shape {b.shape}, operator dim is {A.dim}")
    if max_iter is None:
        max_iter = 10 * A.dim

    x = np.zeros(A.dim)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CGResult(x=x, converged=True, iterations=0, residual_norm=0.0)

    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = tol * b_norm
    best_x, best_res = x.copy(), np.sqrt(rr)
    for it in range(1, max_iter + 1):
        Ap = A(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise NumericBreakdownError(f"non-finite curvature at CG iteration {it}")
        if pAp <= 0.0:
            raise NumericBreakdownError(f"non-positive curvature {pAp:.3e} at CG iteration {it}; operator is not SPD")
        alpha = rr / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        if np.isnan(x).any():
            raise NumericBreakdownError(f"NaN in CG iterate at iteration {it}")
        rr_new = float(r @ r)
        res = np.sqrt(rr_new)
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= target:
            return CGResult(x=x, converged=True, iterations=it, residual_norm=res)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x=best_x, converged=False, iterations=max_iter, residual_norm=best_res)
