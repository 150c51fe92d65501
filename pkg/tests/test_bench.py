"""Harness tests: pairing, summaries, CSV formats, CLI behavior."""

import numpy as np
import pytest

from hteforest import bench
from hteforest.bench import (ExperimentGrid, ReplicationResult, cli_main,
                             derive_seed, mse_against_truth, read_results_csv,
                             resolve_pi_known, run_replication, summarize_ratios,
                             write_results_csv)


def tiny_grid(**kw):
    base = dict(setups=("B",), n_values=(160,), p_values=(5,),
                variants=("mob", "mobw"), reps=2, test_n=40, base_seed=7,
                n_trees=20, nuisance_trees=30, min_per_arm=4)
    base.update(kw)
    return ExperimentGrid(**base)


class TestSeeds:
    def test_derivation_is_pure(self):
        a = derive_seed(1, "A", 800, 10, 3, bench.TRAIN_PURPOSE)
        b = derive_seed(1, "A", 800, 10, 3, bench.TRAIN_PURPOSE)
        assert a == b
        assert a != derive_seed(1, "A", 800, 10, 4, bench.TRAIN_PURPOSE)
        assert a != derive_seed(1, "A", 800, 10, 3, bench.TEST_PURPOSE)
        assert a != derive_seed(2, "A", 800, 10, 3, bench.TRAIN_PURPOSE)

    def test_pi_policy(self):
        assert resolve_pi_known("auto", "B") == 0.5
        assert resolve_pi_known("auto", "C") is None
        assert resolve_pi_known("estimate", "B") is None
        assert resolve_pi_known(0.3, "D") == 0.3


class TestRunReplication:
    def test_paired_data_and_variant_identity(self):
        grid = tiny_grid()
        rows = run_replication(grid, "B", 160, 5, 0)
        assert len(rows) == 2
        assert rows[0].seed == rows[1].seed
        # setup B centers by the known 0.5, so mob and mobw coincide exactly
        assert rows[0].mse == rows[1].mse

    def test_oracle_predictor_scores_zero(self):
        truth = np.array([0.3, -1.2, 4.0])
        assert mse_against_truth(truth.copy(), truth) == 0.0

    def test_rows_cover_grid(self):
        grid = tiny_grid(honest_modes=(False, True))
        rows = bench.run_grid(grid)
        assert len(rows) == 2 * 2 * 2  # reps x honest x variants
        assert {r.honest for r in rows} == {False, True}
        assert {r.rep for r in rows} == {0, 1}


class TestSummaries:
    def _rows(self, mses_a, mses_b):
        rows = []
        for rep, (ma, mb) in enumerate(zip(mses_a, mses_b)):
            rows.append(ReplicationResult("B", 100, 5, "mobw", False, rep, 1,
                                          ma, 0.0))
            rows.append(ReplicationResult("B", 100, 5, "mob", False, rep, 1,
                                          mb, 0.0))
        return rows

    def test_identical_results_give_unit_ratio(self):
        rows = self._rows([0.5, 0.7, 0.2], [0.5, 0.7, 0.2])
        out = summarize_ratios(rows, [("mobw", "mob")], boot_samples=200)
        assert len(out) == 1
        assert out[0].ratio == pytest.approx(1.0)
        assert out[0].ci_low == pytest.approx(1.0)
        assert out[0].ci_high == pytest.approx(1.0)

    def test_constant_factor(self):
        rows = self._rows([1.0, 0.4, 2.2], [0.5, 0.2, 1.1])
        out = summarize_ratios(rows, [("mobw", "mob")], boot_samples=200)
        assert out[0].ratio == pytest.approx(2.0)
        assert out[0].ci_low <= out[0].ratio <= out[0].ci_high

    def test_unpaired_reps_dropped(self, capsys):
        rows = self._rows([1.0, float("nan"), 2.0], [0.5, 0.5, 1.0])
        out = summarize_ratios(rows, [("mobw", "mob")], boot_samples=100)
        assert out[0].ratio == pytest.approx(2.0)
        assert "dropping" in capsys.readouterr().err

    def test_deterministic_bootstrap(self):
        rows = self._rows([1.0, 0.4, 2.2, 0.9], [0.6, 0.3, 1.0, 0.8])
        a = summarize_ratios(rows, [("mobw", "mob")], boot_seed=11)
        b = summarize_ratios(rows, [("mobw", "mob")], boot_seed=11)
        assert (a[0].ci_low, a[0].ci_high) == (b[0].ci_low, b[0].ci_high)


def test_results_csv_roundtrip(tmp_path):
    rows = [ReplicationResult("A", 800, 10, "cf", True, 3, 123456, 0.25, 17.5),
            ReplicationResult("B", 160, 5, "mob", False, 0, 99, float("nan"),
                              2.0)]
    path = tmp_path / "r.csv"
    write_results_csv(rows, path)
    back = read_results_csv(path)
    assert back[0] == rows[0]
    assert back[1].setup == "B" and np.isnan(back[1].mse)


def test_read_rejects_malformed(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("setup,wrong,header\n")
    with pytest.raises(ValueError):
        read_results_csv(path)


class TestCli:
    def run_args(self, out, extra=()):
        return ["run", "--setup", "B", "--n", "160", "--p", "5",
                "--variants", "mob,mobw", "--reps", "2", "--seed", "7",
                "--trees", "20", "--nuisance-trees", "30", "--test-n", "40",
                "--min-per-arm", "4", "--out", str(out), *extra]

    def test_run_row_count_and_rerun_byte_identical(self, tmp_path, capsys):
        out1 = tmp_path / "r1.csv"
        out2 = tmp_path / "r2.csv"
        assert cli_main(self.run_args(out1)) == 0
        assert cli_main(self.run_args(out2)) == 0
        lines = out1.read_text().splitlines()
        assert lines[0] == "setup,n,p,variant,honest,rep,seed,mse,runtime_ms"
        assert len(lines) == 5  # header + 2 reps x 2 variants
        assert out1.read_bytes() == out2.read_bytes()

    def test_summarize_produces_cell_rows(self, tmp_path):
        res = tmp_path / "r.csv"
        summ = tmp_path / "s.csv"
        assert cli_main(self.run_args(res)) == 0
        rc = cli_main(["summarize", "--in", str(res), "--pairs", "mobw:mob",
                       "--out", str(summ), "--boot-samples", "100"])
        assert rc == 0
        lines = summ.read_text().splitlines()
        assert lines[0] == "comparison,setup,n,p,honest,ratio,ci_low,ci_high"
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert fields[0] == "mobw:mob" and fields[1] == "B"
        assert float(fields[5]) == pytest.approx(1.0)  # identity on setup B

    def test_unknown_flag_is_config_error(self):
        assert cli_main(["run", "--nope", "x"]) == 1

    def test_bad_variant_is_config_error(self, tmp_path):
        rc = cli_main(["run", "--variants", "mob,quantum", "--out",
                       str(tmp_path / "r.csv")])
        assert rc == 1

    def test_unwritable_path_is_config_error(self):
        rc = cli_main(["run", "--setup", "B", "--variants", "mob",
                       "--reps", "1", "--out", "/nonexistent/dir/r.csv"])
        assert rc == 1

    def test_malformed_csv_is_runtime_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("not,a,results,file\n1,2,3,4\n")
        rc = cli_main(["summarize", "--in", str(bad), "--pairs", "mobw:mob",
                       "--out", str(tmp_path / "s.csv")])
        assert rc == 2

    def test_estimate_only(self, tmp_path, capsys):
        out = tmp_path / "r.csv"
        rc = cli_main(self.run_args(out, extra=("--estimate-only",)))
        assert rc == 0
        err = capsys.readouterr().err
        assert "estimated total" in err
        assert out.read_text().splitlines()[0].startswith("setup,")

    def test_timings_flag_breaks_no_schema(self, tmp_path):
        out = tmp_path / "r.csv"
        assert cli_main(self.run_args(out, extra=("--timings",))) == 0
        rows = read_results_csv(out)
        assert any(r.runtime_ms > 0 for r in rows)

    def test_threads_env_override(self, monkeypatch):
        monkeypatch.setenv(bench.THREADS_ENV_VAR, "3")
        assert bench._resolve_threads(None) == 3
        assert bench._resolve_threads(2) == 2
        monkeypatch.delenv(bench.THREADS_ENV_VAR)
        assert bench._resolve_threads(None) == 1


def test_fit_failure_recorded_as_missing(monkeypatch, capsys):
    from hteforest.exceptions import DegenerateError

    def boom(*args, **kwargs):
        raise DegenerateError("synthetic failure")

    monkeypatch.setattr(bench, "fit_hte_forest", boom)
    rows = run_replication(tiny_grid(), "B", 160, 5, 0)
    assert len(rows) == 2
    assert all(np.isnan(r.mse) for r in rows)
    assert "fit failed" in capsys.readouterr().err


def test_parallel_matches_serial():
    grid = tiny_grid(reps=2)
    serial = bench.run_grid(grid, threads=1)
    parallel = bench.run_grid(grid, threads=2)
    assert len(serial) == len(parallel)
    for a, b in zip(serial, parallel):
        assert (a.setup, a.variant, a.rep, a.seed) == (b.setup, b.variant,
                                                       b.rep, b.seed)
        assert a.mse == b.mse
