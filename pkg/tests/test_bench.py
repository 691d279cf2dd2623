"""Plan parsing, cell execution, aggregation tables, two moons and the CLI."""
import csv
import math

import numpy as np
import pytest
from scipy import stats

from bethe_bll import bench as B
from bethe_bll import cli
from bethe_bll.trainer import TrainingDiverged

PLAN = """# tiny plan
out = res
seeds = 1..2
max_steps = 30
dataset = synthetic:linear_gaussian n=100 d=3
method = bethe V1 eb depth=0
method = map depth=0
"""


def rec(ds, method, seed, nll, status="ok"):
    return {"dataset": ds, "method": method, "seed": str(seed), "status": status, "nll": "" if nll is None else repr(nll)}


class TestMethodSpec:
    @pytest.mark.parametrize("text,label", [
        ("bethe", "bethe-V3-eb-d1"),
        ("bethe V1 cv depth=0", "bethe-V1-cv-d0"),
        ("bethe V3 eb fs", "bethe-V3-eb-fs-d1"),
        ("bethe V2 alpha=0.5", "bethe-V2-fixed-a0.5-d1"),
        ("bethe V2 eb head=ordinal", "bethe-V2-eb-ordinal-d1"),
        ("map width=8", "map-d1-w8"),
        ("ensemble M=3", "ensemble-M3-d1"),
    ])
    def test_labels(self, text, label):
        assert B.MethodSpec.parse(text).label == label

    @pytest.mark.parametrize("text", [
        "", "vi", "bethe V4", "bethe depth=3", "bethe head=poisson", "map cv", "map fs",
        "ensemble M=1", "bethe alpha=-1", "bethe depth=x", "bethe colour=red",
    ])
    def test_errors(self, text):
        with pytest.raises(B.PlanError):
            B.MethodSpec.parse(text)


class TestPlan:
    def test_parse(self):
        p = B.parse_plan(PLAN)
        assert p.seeds == (1, 2) and p.out == "res" and p.max_steps == 30
        assert [m.label for m in p.methods] == ["bethe-V1-eb-d0", "map-d0"]

    def test_seed_forms(self):
        assert B.parse_seeds("5..8") == (5, 6, 7, 8)
        assert B.parse_seeds("3, 9,1") == (3, 9, 1)
        for bad in ("", "a..b", "1,x"):
            with pytest.raises(B.PlanError):
                B.parse_seeds(bad)

    def test_defaults(self):
        p = B.parse_plan("dataset = synthetic:two_moons\nmethod = map\n")
        assert p.seeds == tuple(range(5, 25)) and p.max_steps == 5000

    @pytest.mark.parametrize("text", [
        "method = map\n", "dataset = x.spec\n", "dataset x\nmethod = map\n",
        "dataset = a\nmethod = map\ncolour = red\n", "dataset = a\nmethod = map\nmax_steps = 0\n",
    ])
    def test_errors(self, text):
        with pytest.raises(B.PlanError):
            B.parse_plan(text)

    def test_validate_mismatched_head(self):
        p = B.parse_plan("dataset = synthetic:two_moons\nmethod = bethe head=regression\n")
        with pytest.raises(B.PlanError):
            B.validate_plan(p)
        p = B.parse_plan("dataset = synthetic:linear_gaussian\nmethod = bethe head=binary\n")
        with pytest.raises(B.PlanError):
            B.validate_plan(p)

    def test_validate_missing_file(self, tmp_path):
        p = B.parse_plan("dataset = nope.spec\nmethod = map\n", base_dir=tmp_path)
        with pytest.raises(B.PlanError):
            B.validate_plan(p)

    def test_synthetic_names(self):
        assert B.dataset_name("synthetic:linear_probit d=3") == "linear_probit_n1000_d3_alpha1"
        with pytest.raises(B.PlanError):
            B.dataset_name("synthetic:spirals")
        with pytest.raises(B.PlanError):
            B.dataset_name("synthetic:two_moons width=3")


class TestRun:
    def test_rows_and_files(self, tmp_path):
        p = B.parse_plan(PLAN.replace("method = map depth=0\n", ""))
        p.seeds = (1, 2)
        recs = B.cmd_run(p, tmp_path)
        assert len(recs) == 2 and all(r.status == "ok" for r in recs)
        lines = (tmp_path / "results.csv").read_text().splitlines()
        assert lines[0] == B.SCHEMA and lines[1].split(",") == B.RESULT_COLUMNS and len(lines) == 4
        assert len(list((tmp_path / "trajectories").iterdir())) == 2
        assert (tmp_path / "timings.csv").exists()

    def test_deterministic(self, tmp_path):
        p = B.parse_plan(PLAN)
        B.cmd_run(p, tmp_path / "a")
        B.cmd_run(p, tmp_path / "b")
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    def test_crash_is_isolated(self, tmp_path, monkeypatch):
        orig = B.train

        def flaky(cfg, sp, model=None):
            if cfg.seed == 2:
                raise TrainingDiverged("forced")
            return orig(cfg, sp, model)

        monkeypatch.setattr(B, "train", flaky)
        recs = B.cmd_run(B.parse_plan(PLAN), tmp_path)
        status = {(r.method, r.seed): r.status for r in recs}
        assert status[("map-d0", 1)] == "ok" and status[("map-d0", 2)] == "failed"
        failed = [r for r in recs if r.status == "failed"][0]
        assert "forced" in failed.error and failed.row()[B.RESULT_COLUMNS.index("nll")] == ""

    def test_ensemble_cell(self):
        r = B.run_cell("synthetic:linear_gaussian n=100 d=3", B.MethodSpec.parse("ensemble M=2 depth=0"), 1, 20)
        assert r.status == "ok" and r.steps == 40 and math.isnan(r.alpha_final)

    def test_near_bayes_optimal_nll(self):
        # sigma = 0.5 noise: optimal mean NLL is 0.5 log(2 pi 0.25) + 0.5
        r = B.run_cell("synthetic:linear_gaussian", B.MethodSpec.parse("bethe V1 eb depth=0"), 5)
        ref = 0.5 * np.log(2 * np.pi * 0.25) + 0.5
        assert abs(r.nll - ref) <= 0.05
        assert abs(r.sigma_obs_final - 0.25) <= 0.05


class TestAggregate:
    def test_single_method_is_best(self):
        _, _, cells = B.aggregate([rec("d", "m", s, 1.0 + s) for s in range(3)])
        assert cells["d", "m"].mark == "best"

    def test_identical_methods_tie(self):
        rows = [rec("d", m, s, 1.0 + 0.1 * s) for m in ("a", "b") for s in range(4)]
        _, _, cells = B.aggregate(rows)
        assert {c.mark for c in cells.values()} == {"best", "tied"}
        assert [c.p_value for c in cells.values() if c.mark == "tied"] == [1.0]

    def test_hand_t_test(self):
        a = [1.0, 1.2, 0.9, 1.1, 1.05]
        b = [1.3, 1.25, 1.4, 1.2, 1.5]
        rows = [rec("d", "a", s, v) for s, v in enumerate(a)] + [rec("d", "b", s, v) for s, v in enumerate(b)]
        _, _, cells = B.aggregate(rows)
        d = np.subtract(b, a)
        t = d.mean() / (d.std(ddof=1) / np.sqrt(5))
        np.testing.assert_allclose(cells["d", "b"].p_value, stats.t.sf(t, 4), rtol=1e-12)
        assert cells["d", "b"].mark == ""

    def test_failed_rows_ignored(self):
        _, _, cells = B.aggregate([rec("d", "m", 0, 1.0), rec("d", "m", 1, None, "failed")])
        assert cells["d", "m"].nll.size == 1

    def test_report_files(self, tmp_path):
        path = tmp_path / "r.csv"
        with open(path, "w", newline="") as fh:
            fh.write(B.SCHEMA + "\n")
            w = csv.DictWriter(fh, ["dataset", "method", "seed", "status", "nll"])
            w.writeheader()
            for s in range(3):
                w.writerow(rec("d", "x", s, 1.0 + s))
                w.writerow(rec("d", "y", s, 2.0 + s + 0.01 * s * s))
        md = B.cmd_report(path, tmp_path)
        assert "**2.000 +/- 0.577**" in md
        assert (tmp_path / "report.csv").read_text().count("\n") == 3


class TestEbVsCv:
    def test_table(self):
        rows = [rec("d", "bethe-V1-eb-d0", s, 1.0) for s in range(4)]
        rows += [rec("d", "bethe-V1-cv-d0", s, 1.1 + 0.01 * s) for s in range(4)]
        rows += [rec("d", "map-d0", s, 0.5) for s in range(4)]
        (r,) = B.eb_vs_cv_table(rows)
        assert r.method == "bethe-V1-d0" and r.n == 4
        np.testing.assert_allclose(r.mean_diff, 0.115, rtol=1e-12)
        assert r.significant

    def test_negative_direction(self):
        rows = [rec("d", "bethe-V2-eb-d1", s, 1.0 + 0.1 * s) for s in range(3)]
        rows += [rec("d", "bethe-V2-cv-d1", s, 0.9 + 0.1 * s + 0.001 * s) for s in range(3)]
        (r,) = B.eb_vs_cv_table(rows)
        assert r.mean_diff < 0 and r.p_value < 0.5

    def test_needs_bethe_method(self, tmp_path):
        with pytest.raises(B.PlanError):
            B.cmd_eb_vs_cv(B.parse_plan("dataset = synthetic:two_moons\nmethod = map\n"), tmp_path)


class TestTwoMoons:
    def test_grid_shape(self):
        g = B.two_moons_grid(resolution=7, max_steps=40)
        assert g.lattice.shape == (49, 2)
        for p in (g.p_map, g.p_bethe):
            assert p.shape == (49,) and np.all((p >= 0) & (p <= 1))
        assert np.all(g.v_bethe >= 0) and g.X_train.shape == (120, 2)
        np.testing.assert_allclose(g.lattice[[0, -1]], [[-2.5, -2.5], [3.5, 3.5]])

    def test_resolution_check(self):
        with pytest.raises(ValueError):
            B.two_moons_grid(resolution=1)


class TestCli:
    def test_verify_passes(self, capsys):
        assert cli.main(["verify", "--suite", "ordinal_reduction", "--suite", "alpha_fixed_point"]) == 0
        assert capsys.readouterr().out.count("[PASS]") == 2

    def test_verify_catches_mutation(self, capsys):
        assert cli.main(["verify", "--suite", "gradients", "--mutate", "tanh"]) == 1
        assert "[FAIL] gradients" in capsys.readouterr().out

    def test_unknown_mutation(self, capsys):
        assert cli.main(["verify", "--mutate", "nope"]) == 2

    def test_run_and_report(self, tmp_path, capsys):
        plan = tmp_path / "plan.txt"
        plan.write_text(PLAN)
        assert cli.main(["run", "--plan", str(plan), "--seeds", "3", "--out", str(tmp_path / "o")]) == 0
        assert "2 runs, 0 failed" in capsys.readouterr().out
        assert cli.main(["report", str(tmp_path / "o" / "results.csv"), "--out", str(tmp_path / "o")]) == 0
        assert "| linear_gaussian_n100_d3_alpha1_sigma0.5 |" in capsys.readouterr().out

    def test_bad_plan_exit_code(self, tmp_path, capsys):
        plan = tmp_path / "plan.txt"
        plan.write_text("method = map\n")
        assert cli.main(["run", "--plan", str(plan)]) == 2
        assert "error:" in capsys.readouterr().err
