"""Command-line driver: ``compare``, ``transfer``, ``tune`` and ``verify``.

Every run writes one directory holding ``manifest.json``, per-seed traces under
``traces/`` and a ``summary.csv``. Exit codes: 0 success, 1 invalid
configuration, 2 every run failed, 3 some runs failed, 4 a verified property
failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .dataio import SYNTHETIC_KINDS, SplitSpec, fingerprint, gen_synthetic, load_csv, split, standardize_splits
from .errors import ConfigError, InfselError
from .evaluators import MODES, TreeEnsembleConfig, evaluate, fit_tree_ensemble
from .losskernels import DEFAULT_LAMBDA, Dataset, LossKernel
from .selector import epsilon_greedy_select, random_select, validation_objective
from .tuner import TunerConfig, forest_search_space, hyperband_run, incumbent_ranks
from .verification import PROPERTIES, run_property

logger = logging.getLogger("infsel")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED, EXIT_PARTIAL, EXIT_PROPERTY = 0, 1, 2, 3, 4
SUMMARY_COLUMNS = ("step", "mean_objective", "sd_objective", "method")
# flags that change where or how fast a run happens but not what it computes
_NON_SEMANTIC = ("out", "jobs", "command", "handler")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _key_value(text: str) -> tuple[str, float]:
    key, sep, value = text.partition("=")
    try:
        return key.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected KEY=NUMBER, got {text!r}") from None


def _add_data_args(p: argparse.ArgumentParser, n: int, d: int, kind: str):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV file with a header row")
    g.add_argument("--target-col", help="target column name or zero-based index (with --data)")
    g.add_argument("--task", choices=("regression", "classification"), default="regression")
    g.add_argument("--synthetic", choices=SYNTHETIC_KINDS, default=None,
                   help=f"generate data instead of reading a CSV (default when --data is absent: {kind})")
    g.add_argument("--n", type=_positive_int, default=n, help="synthetic row count")
    g.add_argument("--d", type=_positive_int, default=d, help="synthetic feature count")
    g.add_argument("--seed", type=int, default=0, help="synthetic data seed")
    g.add_argument("--synthetic-param", action="append", type=_key_value, default=[], metavar="KEY=VALUE",
                   help="generator parameter, e.g. label_noise=0.1 (repeatable)")
    p.set_defaults(default_synthetic=kind)


def _add_run_args(p: argparse.ArgumentParser, iters: int):
    p.add_argument("--iters", type=_nonneg_int, default=iters)
    p.add_argument("--seeds", type=_positive_int, default=10, help="run seeds 0..S-1")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA, help="L2 strength of the selection kernel")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="infsel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"infsel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compare", help="influence greedy against random selection")
    _add_data_args(p, 2000, 10, "outlier_regression")
    _add_run_args(p, 200)
    p.add_argument("--m", type=_positive_int, default=1, help="points added per iteration")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("transfer", help="tree-ensemble RMSE on linearly selected subsets")
    _add_data_args(p, 1000, 10, "hetero_regression")
    _add_run_args(p, 200)
    p.add_argument("--m", type=_positive_int, default=1)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--eval-every", type=_positive_int, default=10)
    p.add_argument("--evaluator", choices=MODES, default="gradient_boosted")
    p.add_argument("--n-trees", type=_positive_int, default=100)
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("tune", help="paired Hyperband with random and influence subsamplers")
    _add_data_args(p, 506, 13, "hetero_regression")
    _add_run_args(p, 4)
    p.add_argument("--eta-cycle", type=_int_list, default=(2, 3, 4, 5))
    p.add_argument("--max-resource", type=_positive_int, default=None, help="default: training-set size")
    p.add_argument("--subsampler", choices=("paired", "random", "influence"), default="paired")
    p.add_argument("--epsilon", type=float, default=0.0, help="influence subsampler epsilon")
    p.set_defaults(handler=cmd_tune)

    p = sub.add_parser("verify", help="numerical property suites")
    p.add_argument("--only", default=None, help=f"comma-separated subset of: {', '.join(PROPERTIES)}")
    p.add_argument("--quick", action="store_true", help="fewer instances per property")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_verify)
    return parser


# data and per-seed preparation -----------------------------------------------------------

def _load(args) -> tuple[Dataset, dict]:
    if args.data and (args.synthetic or args.synthetic_param):
        raise ConfigError("--data cannot be combined with synthetic-data flags")
    if args.data:
        if args.target_col is None:
            raise ConfigError("--data requires --target-col")
        data = load_csv(args.data, args.target_col, task=args.task)
        source = {"path": str(args.data), "target_col": args.target_col, "task": args.task}
    else:
        kind = args.synthetic or args.default_synthetic
        params = dict(args.synthetic_param)
        data = gen_synthetic(kind, args.n, args.d, seed=args.seed, **params)
        source = {"synthetic": kind, "n": args.n, "d": args.d, "seed": args.seed, "params": params}
    return data, dict(source, **fingerprint(data))


def prepare_seed(data: Dataset, seed: int) -> tuple[Dataset, Dataset, np.ndarray]:
    """Seeded split, train-fitted standardization, and an initial subset of max(d, 10) rows."""
    train, val, _test = standardize_splits(*split(data, SplitSpec(seed=seed)))
    size = min(max(train.d, 10), train.n)
    init = np.sort(np.random.default_rng(seed).choice(train.n, size=size, replace=False))
    return train, val, init


def _select(data, seed, method, iters, m, epsilon, lam):
    train, val, init = prepare_seed(data, seed)
    kernel = LossKernel.for_dataset(train, lam=lam)
    obj = validation_objective(kernel, val)
    if method == "greedy":
        trace = epsilon_greedy_select(kernel, train, val, init, obj, m=m, iterations=iters, epsilon=epsilon,
                                      rng_seed=seed)
    else:
        trace = random_select(kernel, train, init, obj, m=m, iterations=iters, rng_seed=seed)
    return train, val, trace


def compare_job(data: Dataset, seed: int, method: str, opts: dict) -> dict:
    _, _, trace = _select(data, seed, method, opts["iters"], opts["m"], opts["epsilon"], opts["lam"])
    return {"trace": trace, "steps": [s.step for s in trace.steps], "values": trace.objectives.tolist()}


def transfer_job(data: Dataset, seed: int, method: str, opts: dict) -> dict:
    train, val, trace = _select(data, seed, method, opts["iters"], opts["m"], opts["epsilon"], opts["lam"])
    cfg = TreeEnsembleConfig(**opts["evaluator"])
    order = trace.selected()
    steps, values = [], []
    for s in trace.steps:
        if s.step % opts["eval_every"]:
            continue
        ens = fit_tree_ensemble(cfg, train, order[:s.cumulative_points])
        steps.append(s.step)
        values.append(evaluate(ens.predict(val.features), val.targets, "rmse"))
    return {"trace": trace, "steps": steps, "values": values}


def tune_job(data: Dataset, seed: int, method: str, opts: dict) -> dict:
    train, val, _ = prepare_seed(data, seed)
    arms = ("random", "influence") if method == "paired" else (method,)
    traces = {}
    for arm in arms:
        cfg = TunerConfig(eta_cycle=opts["eta_cycle"], max_resource=opts["max_resource"], subsampler=arm,
                          epsilon=opts["epsilon"], seed=seed, iterations=opts["iters"])
        traces[arm] = hyperband_run(forest_search_space(), train, val, cfg=cfg)
    out = {"traces": traces}
    if method == "paired":
        same = traces["random"].config_sets() == traces["influence"].config_sets()
        if not same:
            raise InfselError("paired arms evaluated different configuration sets")
        out["configs_identical"] = same
        out["ranks"] = {k: v.tolist() for k, v in
                        zip(("influence", "random"), incumbent_ranks(traces["influence"], traces["random"]))}
    return out


def _guarded(fn: Callable, data: Dataset, seed: int, method: str, opts: dict) -> tuple[int, str, dict | None, str]:
    try:
        return seed, method, fn(data, seed, method, opts), ""
    except Exception as exc:  # one seed failing must not sink the run
        logger.debug("seed %d %s failed:\n%s", seed, method, traceback.format_exc())
        return seed, method, None, f"{type(exc).__name__}: {exc}"


def run_jobs(fn: Callable, data: Dataset, jobs: Sequence[tuple[int, str]], opts: dict, n_jobs: int = 1) -> list:
    """Run ``fn`` per (seed, method); results come back in job order whatever the worker count."""
    if n_jobs <= 1:
        out = []
        for seed, method in jobs:
            out.append(_guarded(fn, data, seed, method, opts))
            logger.info("seed %d %s done%s", seed, method, "" if not out[-1][3] else " (failed)")
        return out
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        futures = [ex.submit(_guarded, fn, data, s, mth, opts) for s, mth in jobs]
        return [f.result() for f in futures]


# output ----------------------------------------------------------------------------------

class RunDir:
    """Output directory that records a sha256 for every file it writes."""

    def __init__(self, path):
        self.root = Path(path)
        self.files: dict[str, str] = {}
        self._drop_previous()
        (self.root / "traces").mkdir(parents=True, exist_ok=True)

    def _drop_previous(self):
        # files listed by an earlier manifest in the same directory would otherwise linger
        old = self.root / "manifest.json"
        if not old.is_file():
            return
        try:
            listed = json.loads(old.read_text())["files"]
        except (ValueError, KeyError, TypeError):
            return
        for rel in listed:
            p = self.root / rel
            if p.is_file():
                p.unlink()

    def write(self, rel: str, text: str):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8", newline="")
        self.files[rel] = hashlib.sha256(text.encode("utf-8")).hexdigest()


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def summarize(curves: dict[str, list[tuple[list[int], list[float]]]]) -> str:
    """Mean and sd (ddof 1; 0 for a single seed) of per-seed curves on their shared step grid."""
    rows = []
    for method, runs in curves.items():
        if not runs:
            continue
        steps = runs[0][0]
        length = min(len(r[0]) for r in runs)
        vals = np.array([r[1][:length] for r in runs], dtype=float)
        sd = vals.std(axis=0, ddof=1) if len(runs) > 1 else np.zeros(length)
        for i in range(length):
            rows.append([steps[i], repr(float(vals[:, i].mean())), repr(float(sd[i])), method])
    return _csv(SUMMARY_COLUMNS, rows)


def _semantic_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in _NON_SEMANTIC}
    return json.loads(json.dumps(cfg, default=list))


def manifest_hash(command: str, config: dict, dataset: dict | None) -> str:
    blob = json.dumps({"command": command, "config": config, "dataset": dataset, "version": __version__},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _finish(run: RunDir, args, config: dict, dataset: dict | None, seeds: list[int], started: str,
            extra: dict | None = None) -> str:
    doc = {
        "command": args.command,
        "config": config,
        "seeds": seeds,
        "dataset": dataset,
        "software": {"package": "infsel", "version": __version__, "numpy": np.__version__},
        "config_hash": manifest_hash(args.command, config, dataset),
        "started": started,
        "finished": _now(),
        "files": dict(sorted(run.files.items())),
    }
    if extra:
        doc.update(extra)
    (run.root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc["config_hash"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _error_rows(results) -> list[list]:
    return [[seed, method, err.split(":", 1)[0], err.split(":", 1)[-1].strip()]
            for seed, method, _, err in results if err]


def _exit_code(results) -> int:
    failed = sum(1 for r in results if r[3])
    if failed == 0:
        return EXIT_OK
    for seed, method, _, err in results:
        if err:
            print(f"seed {seed} {method}: {err}", file=sys.stderr)
    return EXIT_FAILED if failed == len(results) else EXIT_PARTIAL


def _write_errors(run: RunDir, results):
    rows = _error_rows(results)
    if rows:
        run.write("errors.csv", _csv(("seed", "method", "error_type", "message"), rows))


# commands --------------------------------------------------------------------------------

def _check_epsilon(args):
    if not 0.0 <= args.epsilon <= 1.0:
        raise ConfigError(f"--epsilon must lie in [0, 1], got {args.epsilon}")
    if args.lam < 0:
        raise ConfigError("--lam must be non-negative")


def _selection_command(args, job: Callable, opts: dict, extra_config: dict | None = None,
                       regression_only: bool = False) -> int:
    started = _now()
    _check_epsilon(args)
    data, dataset = _load(args)
    if regression_only and data.task != "regression":
        raise ConfigError(f"{args.command} needs a regression dataset")
    split(data, SplitSpec(seed=0))  # fails fast on datasets too small to split
    seeds = list(range(args.seeds))
    config = dict(_semantic_config(args), standardize=True, initial_subset_size="max(d, 10)",
                  **(extra_config or {}))
    mhash = manifest_hash(args.command, config, dataset)
    run = RunDir(args.out)
    methods = ("greedy", "random")
    results = run_jobs(job, data, [(s, mth) for s in seeds for mth in methods], opts, args.jobs)

    curves: dict[str, list] = {m: [] for m in methods}
    traces = {}
    for seed, method, res, err in results:
        if err:
            continue
        run.write(f"traces/{method}_seed{seed}.csv", res["trace"].to_csv())
        traces[f"{method}_seed{seed}"] = res["trace"].to_dict()
        if job is transfer_job:
            run.write(f"traces/{method}_seed{seed}_rmse.csv",
                      _csv(("step", "rmse"), [[s, repr(float(v))] for s, v in zip(res["steps"], res["values"])]))
        curves[method].append((res["steps"], res["values"]))
    run.write("traces.json", json.dumps({"manifest_hash": mhash, "traces": traces}, sort_keys=True))
    run.write("summary.csv", summarize(curves))
    _write_errors(run, results)
    _finish(run, args, config, dataset, seeds, started)
    return _exit_code(results)


def cmd_compare(args) -> int:
    opts = {"iters": args.iters, "m": args.m, "epsilon": args.epsilon, "lam": args.lam}
    return _selection_command(args, compare_job, opts)


def cmd_transfer(args) -> int:
    evaluator = asdict(TreeEnsembleConfig(mode=args.evaluator, n_trees=args.n_trees, seed=0))
    opts = {"iters": args.iters, "m": args.m, "epsilon": args.epsilon, "lam": args.lam,
            "eval_every": args.eval_every, "evaluator": evaluator}
    return _selection_command(args, transfer_job, opts, {"evaluator_config": evaluator, "selection_kernel": "squared"},
                              regression_only=True)


def cmd_tune(args) -> int:
    started = _now()
    _check_epsilon(args)
    if args.iters < 1:
        raise ConfigError("tune needs --iters >= 1 Hyperband iterations")
    data, dataset = _load(args)
    if data.task != "regression":
        raise ConfigError("tune needs a regression dataset")
    train, _, _ = prepare_seed(data, 0)
    if args.max_resource is not None and args.max_resource > train.n:
        raise ConfigError(f"--max-resource {args.max_resource} exceeds training-set size {train.n}")
    TunerConfig(eta_cycle=args.eta_cycle)  # validates eta values
    space = {k: repr(v) for k, v in forest_search_space().items()}
    seeds = list(range(args.seeds))
    config = dict(_semantic_config(args), standardize=True, search_space=space, metric="rmse",
                  min_resource="max(d, 10)")
    mhash = manifest_hash(args.command, config, dataset)
    run = RunDir(args.out)
    opts = {"iters": args.iters, "eta_cycle": tuple(args.eta_cycle), "max_resource": args.max_resource,
            "epsilon": args.epsilon}
    results = run_jobs(tune_job, data, [(s, args.subsampler) for s in seeds], opts, args.jobs)

    arms = ("random", "influence") if args.subsampler == "paired" else (args.subsampler,)
    curves: dict[str, list] = {a: [] for a in arms}
    traces, rank_rows, pairing = {}, [], {}
    for seed, _, res, err in results:
        if err:
            continue
        for arm, tr in res["traces"].items():
            run.write(f"traces/{arm}_seed{seed}.csv", tr.to_csv())
            traces[f"{arm}_seed{seed}"] = tr.to_dict()
            curves[arm].append(([i.hyperband_iter for i in tr.incumbents], [i.score for i in tr.incumbents]))
        if "ranks" in res:
            pairing[str(seed)] = res["configs_identical"]
            for it, (ri, rr) in enumerate(zip(res["ranks"]["influence"], res["ranks"]["random"])):
                rank_rows.append([it, seed, ri, rr])
    run.write("traces.json", json.dumps({"manifest_hash": mhash, "traces": traces}, sort_keys=True))
    run.write("summary.csv", summarize(curves))
    extra = {}
    if args.subsampler == "paired" and rank_rows:
        run.write("ranks.csv", _csv(("hyperband_iter", "seed", "influence_rank", "random_rank"), rank_rows))
        ranks = np.array([r[2:] for r in rank_rows], dtype=float)
        iters = np.array([r[0] for r in rank_rows])
        summary_rows = []
        for it in sorted(set(iters.tolist())):
            sel = iters == it
            summary_rows.append([it, repr(float(ranks[sel, 0].mean())), repr(float(ranks[sel, 1].mean()))])
        run.write("rank_summary.csv", _csv(("hyperband_iter", "influence_mean_rank", "random_mean_rank"),
                                           summary_rows))
        extra = {"configs_identical": all(pairing.values()), "configs_identical_by_seed": pairing,
                 "influence_mean_rank": float(ranks[:, 0].mean())}
        run.write("pairing.json", json.dumps({"manifest_hash": mhash, **extra}, sort_keys=True, indent=2))
    _write_errors(run, results)
    _finish(run, args, config, dataset, seeds, started, extra)
    return _exit_code(results)


def cmd_verify(args) -> int:
    started = _now()
    names = list(PROPERTIES)
    if args.only:
        names = [n.strip() for n in args.only.split(",") if n.strip()]
        unknown = [n for n in names if n not in PROPERTIES]
        if unknown:
            raise ConfigError(f"unknown properties {unknown}; choose from {list(PROPERTIES)}")
    config = _semantic_config(args)
    mhash = manifest_hash(args.command, config, None)
    run = RunDir(args.out)
    results = []
    for name in names:
        r = run_property(name, quick=args.quick, seed=args.seed)
        logger.info("%s: %s", name, "pass" if r.passed else "FAIL")
        results.append(r)
    doc = {"manifest_hash": mhash, "quick": args.quick, "all_passed": all(r.passed for r in results),
           "properties": {r.name: r.to_dict() for r in results}}
    run.write("properties.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _finish(run, args, config, None, [args.seed], started)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed properties: " + ", ".join(failed), file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except (ConfigError, InfselError, OSError) as exc:
        # InfselError at this level comes from loading or validating inputs, before any seed runs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
