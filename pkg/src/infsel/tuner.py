"""Hyperband over training-subset size, with pluggable (random or influence) subsamplers.

The resource given to a configuration is the number of training points it is
fit on. Subsamplers return nested subsets, so a larger rung always sees a
superset of the data a smaller rung saw.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .evaluators import TreeEnsembleConfig, evaluate, fit_tree_ensemble
from .losskernels import Dataset, LossKernel
from .selector import epsilon_greedy_select

logger = logging.getLogger(__name__)

TUNER_COLUMNS = ("hyperband_iter", "bracket", "rung", "config_json", "resource", "score", "wall_time_ms")


# search space ----------------------------------------------------------------------------

@dataclass(frozen=True)
class IntRange:
    low: int
    high: int

    def __post_init__(self):
        if self.low > self.high:
            raise ConfigError(f"empty integer range [{self.low}, {self.high}]")

    def sample(self, rng):
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class RealRange:
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if self.low > self.high:
            raise ConfigError(f"empty real range [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise ConfigError("log ranges must be strictly positive")

    def sample(self, rng):
        if self.log:
            return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ConfigError("categorical dimension needs at least one choice")

    def sample(self, rng):
        return self.choices[int(rng.integers(len(self.choices)))]


@dataclass(frozen=True)
class Boolean:
    def sample(self, rng):
        return bool(rng.random() < 0.5)


SearchSpace = dict  # name -> IntRange | RealRange | Categorical | Boolean


def sample_config(space: SearchSpace, rng: np.random.Generator) -> dict:
    """Draw every dimension independently (log-uniform for log ranges)."""
    return {name: dim.sample(rng) for name, dim in space.items()}


def forest_search_space() -> SearchSpace:
    return {
        "n_trees": IntRange(5, 20),
        "max_features_fraction": RealRange(0.01, 1.0),
        "min_samples_split": IntRange(2, 11),
        "min_samples_leaf": IntRange(2, 11),
        "bootstrap": Boolean(),
    }


# schedule --------------------------------------------------------------------------------

@dataclass(frozen=True)
class Bracket:
    s: int
    n_configs: int
    resources: tuple[int, ...]
    eta: int

    def rung_sizes(self) -> list[int]:
        sizes = [self.n_configs]
        for _ in self.resources[1:]:
            sizes.append(math.ceil(sizes[-1] / self.eta))
        return sizes

    def cost(self) -> int:
        return sum(n * r for n, r in zip(self.rung_sizes(), self.resources))


def max_bracket(max_resource: int, min_resource: int, eta: int) -> int:
    if eta < 2:
        raise ConfigError(f"eta must be >= 2, got {eta}")
    if min_resource < 1 or max_resource < min_resource:
        raise ConfigError(f"resource floor {min_resource} is above max_resource {max_resource}")
    s = 0
    while min_resource * eta ** (s + 1) <= max_resource:
        s += 1
    return s


def hyperband_schedule(max_resource: int, min_resource: int, eta: int) -> list[Bracket]:
    """Brackets ``s = s_max .. 0``; bracket ``s`` starts ``ceil((s_max+1)/(s+1) * eta^s)``
    configurations at resource ``max_resource * eta^-s``."""
    s_max = max_bracket(max_resource, min_resource, eta)
    out = []
    for s in range(s_max, -1, -1):
        n = math.ceil(Fraction(s_max + 1, s + 1) * eta ** s)
        resources = tuple(max(min_resource, max_resource // eta ** (s - i)) for i in range(s + 1))
        out.append(Bracket(s=s, n_configs=n, resources=resources, eta=eta))
    return out


# successive halving ----------------------------------------------------------------------

@dataclass(frozen=True)
class RungRecord:
    rung: int
    config_index: int
    resource: int
    score: float
    wall_time: float


@dataclass
class HalvingResult:
    survivors: list[int]
    scores: list[float]
    records: list[RungRecord] = field(default_factory=list)


def successive_halving(configs: Sequence[dict], resources: Sequence[int],
                       evaluate_fn: Callable[[dict, np.ndarray], float],
                       subset_provider: Callable[[int], np.ndarray], eta: int = 3) -> HalvingResult:
    """Evaluate every live config at each rung and keep the best ``ceil(n / eta)``.

    Lower scores are better; ties keep the lower config index. A config whose
    evaluation raises is scored ``+inf`` and the run continues.
    """
    if not configs:
        raise ConfigError("successive halving needs at least one configuration")
    if any(b <= a for a, b in zip(resources, resources[1:])):
        raise ConfigError(f"resource schedule must be strictly increasing: {list(resources)}")
    live = list(range(len(configs)))
    result = HalvingResult(survivors=live, scores=[])
    for rung, r in enumerate(resources):
        subset = subset_provider(r)
        scores = []
        for ci in live:
            t0 = time.perf_counter()
            try:
                score = float(evaluate_fn(configs[ci], subset))
                if math.isnan(score):
                    score = math.inf
            except Exception:  # noqa: BLE001 - a failing config must not abort the search
                logger.exception("evaluation failed for config %d at resource %d", ci, r)
                score = math.inf
            scores.append(score)
            result.records.append(RungRecord(rung, ci, int(r), score, time.perf_counter() - t0))
        if rung < len(resources) - 1:
            keep = math.ceil(len(live) / eta)
            order = sorted(range(len(live)), key=lambda j: (scores[j], live[j]))[:keep]
            order.sort(key=lambda j: live[j])
            live = [live[j] for j in order]
            scores = [scores[j] for j in order]
        result.survivors, result.scores = live, scores
    return result


# subsamplers -----------------------------------------------------------------------------

class RandomSubsampler:
    """Prefixes of one seeded permutation of the training rows."""

    label = "random"

    def __init__(self, n: int, seed: int = 0):
        self.order = np.random.default_rng(seed).permutation(n)

    def __call__(self, r: int) -> np.ndarray:
        return self.order[:r]


class InfluenceSubsampler:
    """Prefixes of one influence-greedy growth sequence.

    Growth starts from ``initial_size`` random rows and adds ``m`` points per
    step by residual score under ``kernel`` (a linear or logistic proxy for the
    tuned model). The sequence is extended on demand, so subsets are nested.
    """

    label = "influence"

    def __init__(self, train: Dataset, validation: Dataset, kernel: LossKernel | None = None, seed: int = 0,
                 epsilon: float = 0.0, m: int = 1, initial_size: int | None = None):
        self.train, self.validation = train, validation
        self.kernel = kernel or LossKernel.for_dataset(train)
        self.seed, self.epsilon, self.m = seed, epsilon, m
        size = initial_size or max(train.d, 10)
        self.initial = np.random.default_rng(seed).choice(train.n, size=min(size, train.n), replace=False)
        self.order = np.array(self.initial)

    def __call__(self, r: int) -> np.ndarray:
        if r > self.order.size:
            iters = math.ceil((r - self.initial.size) / self.m)
            trace = epsilon_greedy_select(self.kernel, self.train, self.validation, self.initial, m=self.m,
                                          iterations=iters, epsilon=self.epsilon, rng_seed=self.seed)
            self.order = np.array(trace.selected())
        return self.order[:r]


# hyperband -------------------------------------------------------------------------------

@dataclass(frozen=True)
class TunerConfig:
    eta_cycle: tuple[int, ...] = (2, 3, 4, 5)
    max_resource: int | None = None
    min_resource: int | None = None
    subsampler: str = "random"
    epsilon: float = 0.0
    seed: int = 0
    iterations: int = 4

    def __post_init__(self):
        if not self.eta_cycle or any(e < 2 for e in self.eta_cycle):
            raise ConfigError(f"every eta must be >= 2, got {self.eta_cycle}")
        if self.subsampler not in ("random", "influence"):
            raise ConfigError(f"unknown subsampler {self.subsampler!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")


@dataclass(frozen=True)
class Evaluation:
    hyperband_iter: int
    eta: int
    bracket: int
    rung: int
    config_index: int
    config: dict
    resource: int
    score: float
    wall_time: float = 0.0


@dataclass(frozen=True)
class Incumbent:
    hyperband_iter: int
    eta: int
    score: float
    config: dict


@dataclass
class TunerTrace:
    subsampler: str
    seed: int
    evaluations: list[Evaluation] = field(default_factory=list)
    incumbents: list[Incumbent] = field(default_factory=list)

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TUNER_COLUMNS if include_timing else TUNER_COLUMNS[:-1])
        for e in self.evaluations:
            row = [e.hyperband_iter, e.bracket, e.rung, json.dumps(e.config, sort_keys=True), e.resource,
                   repr(float(e.score))]
            if include_timing:
                row.append(f"{e.wall_time * 1e3:.3f}")
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def config_sets(self) -> list[tuple[int, int, tuple[str, ...]]]:
        """Per (iteration, bracket), the sorted JSON of configs evaluated at rung 0."""
        groups: dict[tuple[int, int], list[str]] = {}
        for e in self.evaluations:
            if e.rung == 0:
                groups.setdefault((e.hyperband_iter, e.bracket), []).append(json.dumps(e.config, sort_keys=True))
        return [(k[0], k[1], tuple(sorted(v))) for k, v in sorted(groups.items())]


def forest_factory(config: dict, seed: int):
    cfg = TreeEnsembleConfig(mode="random_forest", seed=seed, **config)
    return lambda train: fit_tree_ensemble(cfg, train).predict


def make_subsampler(cfg: TunerConfig, train: Dataset, validation: Dataset, kernel: LossKernel | None = None):
    if cfg.subsampler == "random":
        return RandomSubsampler(train.n, cfg.seed)
    return InfluenceSubsampler(train, validation, kernel=kernel, seed=cfg.seed, epsilon=cfg.epsilon)


def hyperband_run(space: SearchSpace, train: Dataset, validation: Dataset, model_factory=forest_factory,
                  cfg: TunerConfig = TunerConfig(), subset_provider=None) -> TunerTrace:
    """Run ``cfg.iterations`` Hyperband sweeps, cycling eta through ``cfg.eta_cycle``.

    ``model_factory(config, seed)`` returns ``fit(train_subset) -> predict``.
    Scores are validation RMSE for regression and log-loss for classification.
    Configuration sampling and per-evaluation model seeds depend only on
    ``cfg.seed``, so two runs that differ only in subsampler see the same
    candidate configurations.
    """
    min_r = cfg.min_resource or max(train.d, 10)
    max_r = cfg.max_resource or train.n
    if max_r > train.n:
        raise ConfigError(f"max_resource {max_r} exceeds training-set size {train.n}")
    if max_r < min_r:
        raise ConfigError(f"resource floor {min_r} is above max_resource {max_r}")
    provider = subset_provider or make_subsampler(cfg, train, validation)
    provider(max_r)
    metric = "rmse" if train.task == "regression" else "logloss"
    label = getattr(provider, "label", cfg.subsampler)
    trace = TunerTrace(subsampler=label, seed=cfg.seed)
    sampler = np.random.default_rng([cfg.seed, 0])

    best: Evaluation | None = None
    for it in range(cfg.iterations):
        eta = cfg.eta_cycle[it % len(cfg.eta_cycle)]
        for bracket in hyperband_schedule(max_r, min_r, eta):
            configs = [sample_config(space, sampler) for _ in range(bracket.n_configs)]

            def evaluate_fn(config, subset, _it=it, _s=bracket.s, _configs=configs):
                seed = int(np.random.default_rng([cfg.seed, _it, _s, _configs.index(config)]).integers(2**31))
                predict = model_factory(config, seed)(train.take(subset))
                return evaluate(predict(validation.features), validation.targets, metric)

            resources = _dedupe(bracket.resources)
            res = successive_halving(configs, resources, evaluate_fn, provider, eta=eta)
            for rec in res.records:
                ev = Evaluation(it, eta, bracket.s, rec.rung, rec.config_index, configs[rec.config_index],
                                rec.resource, rec.score, rec.wall_time)
                trace.evaluations.append(ev)
                if best is None or ev.score < best.score:
                    best = ev
        trace.incumbents.append(Incumbent(it, eta, best.score, best.config))
    return trace


def _dedupe(resources: Sequence[int]) -> list[int]:
    # flooring to min_resource can repeat a size; successive halving needs strictly increasing rungs
    out: list[int] = []
    for r in resources:
        if not out or r > out[-1]:
            out.append(r)
    return out


def incumbent_ranks(a: TunerTrace, b: TunerTrace) -> tuple[np.ndarray, np.ndarray]:
    """Per-iteration rank (1 better, 2 worse, 1.5 tie) of each trace's incumbent score."""
    sa = np.array([i.score for i in a.incumbents])
    sb = np.array([i.score for i in b.incumbents])
    ra = np.where(sa < sb, 1.0, np.where(sa > sb, 2.0, 1.5))
    return ra, 3.0 - ra
