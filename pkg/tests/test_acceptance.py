"""End-to-end acceptance checks, one test per criterion, each timed against its budget."""

import csv
import json
import time

import numpy as np
import pytest

from infsel import verification
from infsel.cli import EXIT_OK, main


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def curves(out):
    by = {}
    with open(out / "summary.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            by.setdefault(r["method"], {})[int(r["step"])] = float(r["mean_objective"])
    return by


def test_quadratic_exactness(acceptance_report):
    res, sec = timed(verification.quadratic_exactness)
    ok = res["passed"] and sec < 10
    acceptance_report(1, ok, f"max |update - refit| = {res['stats']['max_abs_diff']:.2e} over "
                             f"{res['stats']['instances']} instances (tol 1e-9)", sec, 10)
    assert ok


def test_update_error_slope(acceptance_report):
    res, sec = timed(verification.update_error_slope)
    ok = res["passed"] and sec < 60
    acceptance_report(2, ok, f"log-log slope {res['stats']['slope']:.3f} (need <= -1.6)", sec, 60)
    assert ok


def test_batch_additivity(acceptance_report):
    res, sec = timed(verification.batch_additivity)
    ok = res["passed"] and sec < 10
    acceptance_report(3, ok, f"max relative diff {res['stats']['max_rel_diff']:.2e} (tol 1e-10)", sec, 10)
    assert ok


def test_oracle_agreement(acceptance_report):
    res, sec = timed(verification.oracle_agreement)
    s = res["stats"]
    ok = res["passed"] and sec < 300
    acceptance_report(4, ok, f"top-1 {s['top1']:.2f} (need 0.90), top-3 {s['top3']:.2f} (need 0.99), "
                             f"mean exact rank of pick {s['mean_oracle_rank_of_pick']:.2f}", sec, 300)
    assert ok


def test_delta_ordering(acceptance_report):
    res, sec = timed(verification.delta_ordering)
    ok = res["passed"] and sec < 300
    acceptance_report(5, ok, f"{len(res['stats']['violations'])} violations in "
                             f"{res['stats']['instances']} instances", sec, 300)
    assert ok


def _dominance(out, after=5):
    c = curves(out)
    g, r = c["greedy"], c["random"]
    late = [s for s in sorted(g) if s > after]
    bad = [s for s in late if g[s] > r[s]]
    last = max(g)
    return bad, (r[last] - g[last]) / r[last]


def test_greedy_dominates_random(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    runs = {
        "outlier_regression": ["--synthetic", "outlier_regression"],
        "two_gaussians(label_noise=0.1)": ["--synthetic", "two_gaussians", "--synthetic-param", "label_noise=0.1"],
    }
    parts, ok = [], True
    for i, (name, flags) in enumerate(runs.items()):
        out = tmp_path / str(i)
        assert main(["compare", *flags, "--n", "2000", "--d", "10", "--iters", "200", "--seeds", "10",
                     "--epsilon", "0", "--out", str(out)]) == EXIT_OK
        bad, gain = _dominance(out)
        ok &= not bad and gain >= 0.05
        parts.append(f"{name}: {len(bad)} late steps with greedy > random {bad[:5]}, final gain {gain:.1%}")
    sec = time.perf_counter() - t0
    ok &= sec < 600
    acceptance_report(6, ok, "; ".join(parts), sec, 600)
    assert ok


def test_transfer_dominance(acceptance_report, tmp_path):
    out = tmp_path / "transfer"
    rc, sec = timed(main, ["transfer", "--seeds", "10", "--out", str(out)])
    assert rc == EXIT_OK
    c = curves(out)
    steps = sorted(c["greedy"])
    frac = float(np.mean([c["greedy"][s] <= c["random"][s] for s in steps]))
    ok = frac >= 0.8 and sec < 600
    acceptance_report(7, ok, f"greedy RMSE <= random at {frac:.0%} of {len(steps)} checkpoints (need 80%)",
                      sec, 600)
    assert ok


def test_tuning_rank(acceptance_report, tmp_path):
    out = tmp_path / "tune"
    rc, sec = timed(main, ["tune", "--seeds", "10", "--out", str(out)])
    assert rc == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    rank = manifest["influence_mean_rank"]
    ok = rank <= 1.5 and manifest["configs_identical"] and sec < 1200
    acceptance_report(8, ok, f"influence mean rank {rank:.3f} (need <= 1.5), paired configs "
                             f"identical: {manifest['configs_identical']}", sec, 1200)
    assert ok


def test_derivatives_and_solvers(acceptance_report):
    t0 = time.perf_counter()
    d, c = verification.derivative_checks(), verification.cg_vs_cholesky()
    sec = time.perf_counter() - t0
    ok = d["passed"] and c["passed"] and sec < 10
    worst_g = max(v["grad_max_rel_err"] for v in d["stats"].values() if isinstance(v, dict))
    worst_h = max(v["hvp_max_err_per_norm"] for v in d["stats"].values() if isinstance(v, dict))
    acceptance_report(9, ok, f"grad rel err {worst_g:.1e}, hvp err {worst_h:.1e}, "
                             f"CG vs Cholesky {c['stats']['max_abs_diff']:.1e}", sec, 10)
    assert ok


DETERMINISM_RUNS = {
    "compare": ["compare", "--n", "300", "--d", "4", "--iters", "15", "--seeds", "3", "--epsilon", "0.2"],
    "transfer": ["transfer", "--n", "300", "--d", "4", "--iters", "20", "--seeds", "2", "--n-trees", "10",
                 "--eval-every", "5"],
    "tune": ["tune", "--n", "200", "--d", "4", "--iters", "2", "--seeds", "2"],
}


def test_determinism(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    same = {}
    for name, argv in DETERMINISM_RUNS.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert main([*argv, "--out", str(a)]) == EXIT_OK
        assert main([*argv, "--out", str(b)]) == EXIT_OK
        files = sorted(p.name for p in a.glob("*.csv"))
        same[name] = bool(files) and all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    a, b = tmp_path / "verify_a", tmp_path / "verify_b"
    for out in (a, b):
        assert main(["verify", "--quick", "--only", "batch_additivity", "--out", str(out)]) == EXIT_OK
    props = [json.loads((o / "properties.json").read_text())["properties"]["batch_additivity"] for o in (a, b)]
    same["verify"] = props[0]["stats"] == props[1]["stats"]
    sec = time.perf_counter() - t0
    ok = all(same.values())
    acceptance_report(10, ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()),
                      sec, None)
    assert ok
