"""Subset-selection strategies: exact greedy oracle, influence epsilon-greedy, random.

Selection runs over a *pool* dataset; subsets are index lists into it. Each
iteration refits the ERM exactly (warm-started); influence scores are only
used to rank candidates.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetError, ContractError
from .influence import residual_score_vector
from .losskernels import Dataset, FittedModel, LossKernel, SolverConfig, fit_erm

DEFAULT_BUDGET = 1_000_000
TRACE_COLUMNS = ("step", "added_indices", "objective", "cumulative_points", "wall_time_ms")


@dataclass(frozen=True)
class Objective:
    """A smooth target evaluated at a fitted parameter."""

    value_at: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    label: str = "objective"

    def value(self, model: FittedModel) -> float:
        return float(self.value_at(model.theta))


def validation_objective(kernel: LossKernel, validation: Dataset) -> Objective:
    """Mean (regularized) kernel loss over a validation set."""
    if validation.n == 0:
        raise ContractError("validation set is empty")
    X, y = validation.features, validation.targets
    return Objective(
        value_at=lambda theta: kernel.objective(X, y, theta),
        gradient=lambda theta: kernel.gradient(X, y, theta),
        label="validation_loss",
    )


@dataclass(frozen=True)
class Step:
    step: int
    added: tuple[int, ...]
    objective: float
    cumulative_points: int
    wall_time: float = 0.0


@dataclass
class SelectionTrace:
    strategy: str
    m: int
    initial_subset: tuple[int, ...]
    seed: int | None
    steps: list[Step] = field(default_factory=list)
    epsilon: float | None = None
    exhausted: bool = False
    lam: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([s.objective for s in self.steps])

    def selected(self) -> list[int]:
        out = list(self.initial_subset)
        for s in self.steps:
            out.extend(s.added)
        return out

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS if include_timing else TRACE_COLUMNS[:-1])
        for s in self.steps:
            row = [s.step, ";".join(str(i) for i in s.added), repr(float(s.objective)), s.cumulative_points]
            if include_timing:
                row.append(f"{s.wall_time * 1e3:.3f}")
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_subset"] = list(self.initial_subset)
        d["steps"] = [dict(asdict(s), added=list(s.added)) for s in self.steps]
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        d = dict(d)
        d["initial_subset"] = tuple(d["initial_subset"])
        d["steps"] = [Step(**dict(s, added=tuple(s["added"]))) for s in d["steps"]]
        return cls(**d)


def _validate_initial(pool: Dataset, initial_subset: Sequence[int]) -> list[int]:
    init = [int(i) for i in initial_subset]
    if not init:
        raise ContractError("initial subset must be nonempty")
    if len(set(init)) != len(init):
        raise ContractError("initial subset has duplicate indices")
    if min(init) < 0 or max(init) >= pool.n:
        raise ContractError("initial subset index out of range")
    return init


def _top_m(scores: np.ndarray, candidates: np.ndarray, m: int) -> np.ndarray:
    # candidates are ascending, so a stable sort on -score breaks ties by lowest index
    order = np.argsort(-scores, kind="stable")
    return candidates[order[:m]]


def _select_loop(kernel, pool, initial_subset, objective, m, iterations, epsilon, seed, strategy,
                 candidate_cap, cfg) -> SelectionTrace:
    if m < 1:
        raise ContractError("batch size m must be >= 1")
    if iterations < 0:
        raise ContractError("iterations must be >= 0")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError("epsilon must lie in [0, 1]")
    subset = _validate_initial(pool, initial_subset)
    rng = np.random.default_rng(seed)
    cap_rng = np.random.default_rng([0 if seed is None else seed, 1])
    chosen = np.zeros(pool.n, dtype=bool)
    chosen[subset] = True

    trace = SelectionTrace(strategy=strategy, m=m, initial_subset=tuple(subset), seed=seed,
                           epsilon=epsilon, lam=kernel.lam)
    t0 = time.perf_counter()
    model = fit_erm(kernel, pool, subset, cfg=cfg)
    trace.steps.append(Step(0, (), objective.value(model), len(subset), time.perf_counter() - t0))

    for k in range(1, iterations + 1):
        t0 = time.perf_counter()
        remaining = np.flatnonzero(~chosen)
        if remaining.size < m:
            trace.exhausted = True
            break
        # epsilon = 0 never touches the RNG; epsilon = 1 never flips a coin
        if epsilon >= 1.0 or (epsilon > 0.0 and rng.random() < epsilon):
            added = rng.choice(remaining, size=m, replace=False)
        else:
            cands = remaining
            if candidate_cap is not None and remaining.size > candidate_cap:
                cands = np.sort(cap_rng.choice(remaining, size=candidate_cap, replace=False))
            scores = residual_score_vector(model, objective.gradient(model.theta), pool, cands)
            added = _top_m(scores, cands, m)
        added = [int(i) for i in added]
        chosen[added] = True
        subset.extend(added)
        model = fit_erm(kernel, pool, subset, init=model.theta, cfg=cfg)
        trace.steps.append(Step(k, tuple(added), objective.value(model), len(subset), time.perf_counter() - t0))
    return trace


def epsilon_greedy_select(kernel: LossKernel, pool: Dataset, validation: Dataset | None,
                          initial_subset: Sequence[int], objective: Objective | None = None, m: int = 1,
                          iterations: int = 100, epsilon: float = 0.0, rng_seed: int | None = 0,
                          candidate_cap: int | None = None, cfg: SolverConfig = SolverConfig()) -> SelectionTrace:
    """Influence-guided epsilon-greedy growth of a training subset.

    Each iteration refits on the current subset, then with probability
    ``epsilon`` adds ``m`` uniformly random unchosen points, otherwise the
    ``m`` unchosen points with the largest residual scores at the current fit.
    ``objective`` defaults to the mean validation loss.
    """
    if objective is None:
        if validation is None:
            raise ContractError("either validation or objective is required")
        objective = validation_objective(kernel, validation)
    strategy = "greedy" if epsilon == 0 else f"epsilon_greedy({epsilon:g})"
    return _select_loop(kernel, pool, initial_subset, objective, m, iterations, epsilon, rng_seed, strategy,
                        candidate_cap, cfg)


def random_select(kernel: LossKernel, pool: Dataset, initial_subset: Sequence[int], objective: Objective,
                  m: int = 1, iterations: int = 100, rng_seed: int | None = 0,
                  cfg: SolverConfig = SolverConfig()) -> SelectionTrace:
    """Uniform random batches without replacement, refitting after each."""
    return _select_loop(kernel, pool, initial_subset, objective, m, iterations, 1.0, rng_seed, "random",
                        None, cfg)


def _exhaustive(kernel, pool, subset, objective, m, budget, cfg):
    subset = _validate_initial(pool, subset)
    taken = set(subset)
    remaining = [i for i in range(pool.n) if i not in taken]
    if m < 1 or len(remaining) < m:
        raise ContractError(f"need at least m={m} unchosen points, have {len(remaining)}")
    required = math.comb(len(remaining), m)
    if required > budget:
        raise BudgetError(required, budget)
    base = fit_erm(kernel, pool, subset, cfg=cfg)
    combos, values, models = [], [], []
    for combo in itertools.combinations(remaining, m):
        model = fit_erm(kernel, pool, subset + list(combo), init=base.theta, cfg=cfg)
        combos.append(combo)
        values.append(objective.value(model))
        models.append(model)
    return base, combos, np.array(values), models


def exhaustive_values(kernel: LossKernel, pool: Dataset, subset: Sequence[int], objective: Objective,
                      m: int = 1, budget: int = DEFAULT_BUDGET,
                      cfg: SolverConfig = SolverConfig()) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Objective after exact refit for every candidate batch, in lexicographic batch order."""
    _, combos, values, _ = _exhaustive(kernel, pool, subset, objective, m, budget, cfg)
    return combos, values


def exact_greedy_step(kernel: LossKernel, pool: Dataset, subset: Sequence[int], objective: Objective,
                      m: int = 1, budget: int = DEFAULT_BUDGET,
                      cfg: SolverConfig = SolverConfig()) -> tuple[tuple[int, ...], FittedModel]:
    """Choose the batch whose exact refit minimizes the objective; ties go to the lowest index tuple."""
    _, combos, values, models = _exhaustive(kernel, pool, subset, objective, m, budget, cfg)
    best = int(np.argmin(values))  # first minimum == lexicographically lowest tuple
    return combos[best], models[best]


def exact_greedy_select(kernel: LossKernel, pool: Dataset, initial_subset: Sequence[int], objective: Objective,
                        m: int = 1, iterations: int = 10, budget: int = DEFAULT_BUDGET,
                        cfg: SolverConfig = SolverConfig()) -> SelectionTrace:
    subset = _validate_initial(pool, initial_subset)
    trace = SelectionTrace(strategy="exact_oracle", m=m, initial_subset=tuple(subset), seed=None,
                           lam=kernel.lam)
    t0 = time.perf_counter()
    model = fit_erm(kernel, pool, subset, cfg=cfg)
    trace.steps.append(Step(0, (), objective.value(model), len(subset), time.perf_counter() - t0))
    for k in range(1, iterations + 1):
        t0 = time.perf_counter()
        if pool.n - len(subset) < m:
            trace.exhausted = True
            break
        chosen, model = exact_greedy_step(kernel, pool, subset, objective, m, budget, cfg)
        subset.extend(chosen)
        trace.steps.append(Step(k, tuple(chosen), objective.value(model), len(subset), time.perf_counter() - t0))
    return trace


@dataclass(frozen=True)
class DeltaReport:
    """One-step gaps of the best batch versus the average and the worst batch."""

    delta_prime: float
    delta_double_prime: float
    M: int
    m: int
    greedy_value: float
    mean_value: float
    worst_value: float
    n_candidates: int
    exact: bool = True
    mean_stderr: float = 0.0


def compute_deltas(kernel: LossKernel, pool: Dataset, subset: Sequence[int], objective: Objective, m: int = 1,
                   budget: int = DEFAULT_BUDGET, monte_carlo_draws: int | None = None, seed: int = 0,
                   cfg: SolverConfig = SolverConfig()) -> DeltaReport:
    """Exact-retraining gaps of the greedy batch against the random average and the worst batch.

    Every candidate batch is refit exactly. When the number of batches exceeds
    ``budget`` and ``monte_carlo_draws`` is given (at least 1000), the random
    average is estimated from that many seeded draws with a standard error, and
    the greedy and worst values are taken over the drawn batches; the report is
    then marked ``exact=False``.
    """
    subset = _validate_initial(pool, subset)
    remaining = [i for i in range(pool.n) if i not in set(subset)]
    required = math.comb(len(remaining), m) if len(remaining) >= m else 0
    if required > budget:
        if monte_carlo_draws is None:
            raise BudgetError(required, budget)
        return _deltas_monte_carlo(kernel, pool, subset, remaining, objective, m, max(1000, monte_carlo_draws),
                                   seed, cfg)
    _, _, values, _ = _exhaustive(kernel, pool, subset, objective, m, budget, cfg)
    best, worst = float(values.min()), float(values.max())
    # summation rounding must not push the mean outside [min, max]
    mean = min(max(float(values.mean()), best), worst)
    return DeltaReport(delta_prime=best - mean, delta_double_prime=best - worst, M=len(subset), m=m,
                       greedy_value=best, mean_value=mean, worst_value=worst, n_candidates=len(values))


def _deltas_monte_carlo(kernel, pool, subset, remaining, objective, m, draws, seed, cfg) -> DeltaReport:
    rng = np.random.default_rng(seed)
    base = fit_erm(kernel, pool, subset, cfg=cfg)
    rem = np.asarray(remaining)
    values = np.empty(draws)
    for t in range(draws):
        batch = np.sort(rng.choice(rem, size=m, replace=False))
        values[t] = objective.value(fit_erm(kernel, pool, subset + batch.tolist(), init=base.theta, cfg=cfg))
    best, worst = float(values.min()), float(values.max())
    mean = min(max(float(values.mean()), best), worst)
    stderr = float(values.std(ddof=1) / np.sqrt(draws))
    return DeltaReport(delta_prime=best - mean, delta_double_prime=best - worst, M=len(subset), m=m,
                       greedy_value=best, mean_value=mean, worst_value=worst, n_candidates=draws, exact=False,
                       mean_stderr=stderr)
