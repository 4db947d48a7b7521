import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from infsel import cli
from infsel.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, EXIT_PARTIAL, EXIT_PROPERTY, main


def read_summary(out):
    with open(out / "summary.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def steps_of(rows, method):
    return [int(r["step"]) for r in rows if r["method"] == method]


SMALL = ["--n", "200", "--d", "3", "--iters", "6", "--seeds", "2"]


class TestCompare:
    def test_file_contract_full_size(self, tmp_path):
        out = tmp_path / "run"
        assert main(["compare", "--synthetic", "outlier_regression", "--n", "2000", "--d", "10", "--iters", "200",
                     "--seeds", "10", "--out", str(out)]) == EXIT_OK
        traces = sorted(p.name for p in (out / "traces").glob("*.csv"))
        assert len(traces) == 20
        assert "greedy_seed0.csv" in traces and "random_seed9.csv" in traces
        rows = read_summary(out)
        assert list(rows[0]) == ["step", "mean_objective", "sd_objective", "method"]
        assert steps_of(rows, "greedy") == list(range(201)) == steps_of(rows, "random")

    def test_zero_iterations(self, tmp_path):
        out = tmp_path / "run"
        assert main(["compare", *SMALL[:-4], "--iters", "0", "--seeds", "3", "--out", str(out)]) == EXIT_OK
        rows = read_summary(out)
        assert [(r["step"], r["method"]) for r in rows] == [("0", "greedy"), ("0", "random")]
        # both methods start from the same initial subset
        assert rows[0]["mean_objective"] == rows[1]["mean_objective"]

    def test_identical_summary_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["compare", "--synthetic", "two_gaussians", "--synthetic-param", "label_noise=0.1", *SMALL,
                "--epsilon", "0.3"]
        assert main([*args, "--out", str(a)]) == main([*args, "--out", str(b)]) == EXIT_OK
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
        ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
        assert ma["config_hash"] == mb["config_hash"]

    def test_parallel_matches_serial(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["compare", *SMALL, "--out", str(a)]) == EXIT_OK
        assert main(["compare", *SMALL, "--jobs", "2", "--out", str(b)]) == EXIT_OK
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()

    def test_manifest(self, tmp_path):
        out = tmp_path / "run"
        main(["compare", *SMALL, "--m", "2", "--out", str(out)])
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "compare" and man["seeds"] == [0, 1]
        assert man["config"]["m"] == 2 and man["config"]["lam"] == 1e-4 and man["config"]["standardize"]
        assert man["dataset"]["rows"] == 200 and man["dataset"]["cols"] == 3 and len(man["dataset"]["sha256"]) == 64
        assert man["software"]["version"] and man["started"] and man["finished"]
        for rel, digest in man["files"].items():
            assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
        assert len(list(out.glob("manifest*.json"))) == 1
        traces = json.loads((out / "traces.json").read_text())
        assert traces["manifest_hash"] == man["config_hash"]
        assert set(traces["traces"]) == {"greedy_seed0", "greedy_seed1", "random_seed0", "random_seed1"}

    def test_rerun_drops_stale_traces(self, tmp_path):
        out = tmp_path / "run"
        main(["compare", *SMALL[:-1], "3", "--out", str(out)])
        main(["compare", *SMALL, "--out", str(out)])
        assert sorted(p.name for p in (out / "traces").glob("*.csv")) == [
            "greedy_seed0.csv", "greedy_seed1.csv", "random_seed0.csv", "random_seed1.csv"]

    def test_csv_input(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((80, 3))
        path = tmp_path / "data.csv"
        with open(path, "w") as fh:
            fh.write("a,b,c,label\n")
            for row, lab in zip(X, (X[:, 0] > 0)):
                fh.write(",".join(f"{v:.6f}" for v in row) + f",{'yes' if lab else 'no'}\n")
        out = tmp_path / "run"
        assert main(["compare", "--data", str(path), "--target-col", "label", "--task", "classification",
                     "--iters", "5", "--seeds", "2", "--out", str(out)]) == EXIT_OK
        man = json.loads((out / "manifest.json").read_text())
        assert man["dataset"]["path"] == str(path) and man["dataset"]["task"] == "classification"

    def test_partial_failure(self, tmp_path, monkeypatch):
        real = cli.compare_job

        def flaky(data, seed, method, opts):
            if seed == 1 and method == "random":
                raise RuntimeError("injected")
            return real(data, seed, method, opts)

        monkeypatch.setattr(cli, "compare_job", flaky)
        out = tmp_path / "run"
        assert main(["compare", *SMALL, "--out", str(out)]) == EXIT_PARTIAL
        errors = list(csv.DictReader(open(out / "errors.csv")))
        assert errors == [{"seed": "1", "method": "random", "error_type": "RuntimeError", "message": "injected"}]
        assert steps_of(read_summary(out), "random") == list(range(7))

    def test_total_failure(self, tmp_path, monkeypatch):
        def broken(*a):
            raise RuntimeError("nope")

        monkeypatch.setattr(cli, "compare_job", broken)
        assert main(["compare", *SMALL, "--out", str(tmp_path / "run")]) == EXIT_FAILED


class TestInvalidConfig:
    @pytest.mark.parametrize("argv", [
        ["compare", "--epsilon", "2", "--out", "X"],
        ["compare", "--bogus", "--out", "X"],
        ["compare", "--data", "nowhere.csv", "--out", "X"],
        ["compare", "--data", "nowhere.csv", "--target-col", "y", "--out", "X"],
        ["compare", "--n", "4", "--out", "X"],
        ["compare", "--synthetic-param", "spin=1", "--out", "X"],
        ["compare", "--seeds", "0", "--out", "X"],
        ["transfer", "--synthetic", "two_gaussians", "--out", "X"],
        ["tune", "--eta-cycle", "1", "--n", "120", "--d", "3", "--out", "X"],
        ["tune", "--max-resource", "100000", "--out", "X"],
        ["verify", "--only", "nonsense", "--out", "X"],
        ["frobnicate"],
    ])
    def test_exit_one(self, argv, tmp_path, capsys):
        argv = [a if a != "X" else str(tmp_path / "o") for a in argv]
        assert main(argv) == EXIT_CONFIG
        assert "error:" in capsys.readouterr().err


class TestTransfer:
    ARGS = ["transfer", "--n", "200", "--d", "3", "--iters", "20", "--seeds", "2", "--n-trees", "5"]

    def test_structure(self, tmp_path):
        out = tmp_path / "run"
        assert main([*self.ARGS, "--eval-every", "10", "--out", str(out)]) == EXIT_OK
        rows = read_summary(out)
        assert steps_of(rows, "greedy") == steps_of(rows, "random") == [0, 10, 20]
        assert (out / "traces" / "greedy_seed1_rmse.csv").exists()

    def test_eval_every_thins_grid(self, tmp_path):
        out = tmp_path / "run"
        main([*self.ARGS[:-4], "--iters", "25", "--seeds", "1", "--n-trees", "3", "--eval-every", "7",
              "--out", str(out)])
        assert steps_of(read_summary(out), "greedy") == [0, 7, 14, 21]

    def test_manifest_records_evaluator(self, tmp_path):
        out = tmp_path / "run"
        main(["transfer", "--n", "150", "--d", "3", "--iters", "4", "--seeds", "1", "--evaluator",
              "gradient_boosted", "--n-trees", "50", "--out", str(out)])
        ev = json.loads((out / "manifest.json").read_text())["config"]["evaluator_config"]
        assert ev["mode"] == "gradient_boosted" and ev["n_trees"] == 50
        assert {"max_depth", "learning_rate", "min_samples_leaf", "bootstrap"} <= set(ev)

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main([*self.ARGS, "--out", str(a)])
        main([*self.ARGS, "--out", str(b)])
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


class TestTune:
    ARGS = ["tune", "--n", "150", "--d", "3", "--iters", "2", "--seeds", "2"]

    def test_ranks_and_pairing(self, tmp_path):
        out = tmp_path / "run"
        assert main([*self.ARGS, "--out", str(out)]) == EXIT_OK
        ranks = list(csv.DictReader(open(out / "ranks.csv")))
        assert len(ranks) == 4
        assert {float(r["influence_rank"]) for r in ranks} <= {1.0, 1.5, 2.0}
        pairing = json.loads((out / "pairing.json").read_text())
        assert pairing["configs_identical"] is True
        assert set(pairing["configs_identical_by_seed"]) == {"0", "1"}
        rows = read_summary(out)
        assert steps_of(rows, "random") == steps_of(rows, "influence") == [0, 1]
        assert (out / "rank_summary.csv").exists()

    def test_eta_cycle_flag(self, tmp_path):
        out = tmp_path / "run"
        assert main([*self.ARGS, "--eta-cycle", "3", "--out", str(out)]) == EXIT_OK
        traces = json.loads((out / "traces.json").read_text())["traces"]
        etas = {e["eta"] for t in traces.values() for e in t["evaluations"]}
        assert etas == {3}

    def test_single_arm(self, tmp_path):
        out = tmp_path / "run"
        assert main([*self.ARGS, "--subsampler", "random", "--seeds", "1", "--out", str(out)]) == EXIT_OK
        assert not (out / "ranks.csv").exists()
        assert [p.name for p in (out / "traces").glob("*.csv")] == ["random_seed0.csv"]

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main([*self.ARGS, "--out", str(a)])
        main([*self.ARGS, "--out", str(b)])
        for name in ("summary.csv", "rank_summary.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestVerify:
    def test_only(self, tmp_path):
        out = tmp_path / "run"
        assert main(["verify", "--only", "delta_ordering", "--quick", "--out", str(out)]) == EXIT_OK
        doc = json.loads((out / "properties.json").read_text())
        assert list(doc["properties"]) == ["delta_ordering"]
        assert doc["quick"] is True and doc["properties"]["delta_ordering"]["quick"] is True

    def test_slope_reported(self, tmp_path):
        out = tmp_path / "run"
        main(["verify", "--only", "update_error_slope", "--quick", "--out", str(out)])
        prop = json.loads((out / "properties.json").read_text())["properties"]["update_error_slope"]
        assert prop["stats"]["slope"] <= -1.6 and prop["passed"]

    def test_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setitem(cli.PROPERTIES, "delta_ordering", lambda quick, seed: {"passed": False, "stats": {}})
        assert main(["verify", "--only", "delta_ordering", "--out", str(tmp_path / "o")]) == EXIT_PROPERTY
        assert "delta_ordering" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "infsel", "verify", "--only", "cg_vs_cholesky", "--quick",
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
