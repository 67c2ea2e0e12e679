import csv
import json
import os

import numpy as np
import pytest

from stratfit.cli import main, read_dataset, read_sim_config
from stratfit.densities import Family
from stratfit.errors import DataError

from test_estimation import simulate_four_strata


def write_data_csv(path, ds, cluster=None, extra_missing=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["y", "t", "z"]
        if cluster is not None:
            header.append("cluster")
        writer.writerow(header)
        for i in range(ds.n):
            row = [repr(float(ds.y[i])), int(ds.t[i]), int(ds.z[i])]
            if cluster is not None:
                row.append(cluster[i])
            writer.writerow(row)


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    ds, _ = simulate_four_strata(250, seed=70, dispersion=2.4)
    path = tmp_path_factory.mktemp("data") / "cases.csv"
    rng = np.random.default_rng(0)
    clusters = rng.integers(0, 12, ds.n)
    write_data_csv(path, ds, cluster=clusters)
    return str(path)


class TestReadDataset:
    def test_missing_column_reported(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,t\n1.0,0\n")
        with pytest.raises(DataError, match="missing required column 'z'"):
            read_dataset(str(path), 2, False, Family.NORMAL)

    def test_bad_row_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,t,z\n1.0,0,0\nouch,1,0\n")
        with pytest.raises(DataError, match="row 3"):
            read_dataset(str(path), 2, False, Family.NORMAL)

    def test_out_of_range_level_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,t,z\n1.0,0,0\n2.0,1,5\n")
        with pytest.raises(DataError, match="row 3"):
            read_dataset(str(path), 2, False, Family.NORMAL)

    def test_dichotomize_collapses_levels(self, tmp_path):
        path = tmp_path / "ok.csv"
        path.write_text("y,t,z\n1.0,0,0\n2.0,1,7\n")
        ds = read_dataset(str(path), 2, True, Family.NORMAL)
        assert ds.z.tolist() == [0, 1]

    def test_negative_y_under_tobit_rejected(self, tmp_path):
        path = tmp_path / "neg.csv"
        path.write_text("y,t,z\n-1.0,0,0\n")
        with pytest.raises(DataError, match="negative outcome"):
            read_dataset(str(path), 2, False, Family.TOBIT)

    def test_defaults_for_missing_optional_columns(self, tmp_path):
        path = tmp_path / "ok.csv"
        path.write_text("y,t,z\n1.0,0,0\n2.0,1,1\n")
        ds = read_dataset(str(path), 2, False, Family.NORMAL)
        assert np.all(ds.w == 1.0)
        assert ds.n_clusters == 2


class TestCmdFit:
    def test_end_to_end_outputs(self, data_csv, tmp_path):
        out = tmp_path / "fit_out"
        code = main(["fit", data_csv, "--out-dir", str(out)])
        assert code == 0
        for name in ("params.csv", "effects.csv", "trace.csv",
                     "posterior_hist.csv", "marginal_fit.csv", "fit.json",
                     "summary.json"):
            assert (out / name).exists(), name
        with open(out / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 16
        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] is True
        assert summary["n_starts"] == 16
        assert len(summary["effects"]) == 4

    def test_starts_all_equals_default_sixteen(self, data_csv, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["fit", data_csv, "--out-dir", str(out_a)]) == 0
        assert main(["fit", data_csv, "--starts", "all", "--out-dir", str(out_b)]) == 0
        assert (out_a / "params.csv").read_bytes() == (out_b / "params.csv").read_bytes()
        assert (out_a / "trace.csv").read_bytes() == (out_b / "trace.csv").read_bytes()

    def test_fit_is_bit_stable_across_runs(self, data_csv, tmp_path):
        out_a = tmp_path / "r1"
        out_b = tmp_path / "r2"
        assert main(["fit", data_csv, "--out-dir", str(out_a)]) == 0
        assert main(["fit", data_csv, "--out-dir", str(out_b)]) == 0
        for name in ("params.csv", "effects.csv", "trace.csv",
                     "posterior_hist.csv", "marginal_fit.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_missing_column_exits_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("y,t\n1.0,0\n")
        assert main(["fit", str(bad), "--out-dir", str(tmp_path)]) == 2

    def test_negative_tobit_outcome_exits_2(self, tmp_path):
        bad = tmp_path / "neg.csv"
        bad.write_text("y,t,z\n-1.0,0,0\n1.0,1,0\n")
        assert main(["fit", str(bad), "--family", "tobit",
                     "--out-dir", str(tmp_path)]) == 2

    def test_empty_cell_exits_2(self, tmp_path):
        bad = tmp_path / "empty.csv"
        bad.write_text("y,t,z\n" + "\n".join(
            f"{v},0,0" for v in (1.0, 2.0, 3.0)
        ) + "\n1.0,1,0\n2.0,1,0\n")
        assert main(["fit", str(bad), "--out-dir", str(tmp_path)]) == 2

    def test_non_convergence_exits_3(self, data_csv, tmp_path):
        out = tmp_path / "nc"
        code = main(["fit", data_csv, "--max-iter", "1", "--out-dir", str(out)])
        assert code == 3
        summary = json.loads((out / "summary.json").read_text())
        assert summary["converged"] is False

    def test_tobit_end_to_end(self, tmp_path):
        ds, _ = simulate_four_strata(250, seed=71, dispersion=2.4, sigma=2.0,
                                     effect=3.0, censor=True)
        path = tmp_path / "tobit.csv"
        write_data_csv(path, ds)
        out = tmp_path / "tob_out"
        assert main(["fit", str(path), "--family", "tobit",
                     "--out-dir", str(out)]) == 0
        with open(out / "effects.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert "effect_observed" in rows[0]


class TestCmdDiagnose:
    def test_round_trip_byte_identical(self, data_csv, tmp_path):
        fit_dir = tmp_path / "fit"
        diag_dir = tmp_path / "diag"
        assert main(["fit", data_csv, "--out-dir", str(fit_dir)]) == 0
        assert main(["diagnose", "--fit", str(fit_dir / "fit.json"),
                     "--data", data_csv, "--out-dir", str(diag_dir)]) == 0
        for name in ("trace.csv", "posterior_hist.csv", "marginal_fit.csv"):
            assert (fit_dir / name).read_bytes() == (diag_dir / name).read_bytes()

    def test_missing_fit_file_exits_2(self, tmp_path):
        assert main(["diagnose", "--fit", str(tmp_path / "none.json"),
                     "--out-dir", str(tmp_path)]) == 2

    def test_corrupt_fit_file_exits_2(self, tmp_path):
        bad = tmp_path / "fit.json"
        bad.write_text("{\"not\": \"a fit\"}")
        assert main(["diagnose", "--fit", str(bad), "--out-dir", str(tmp_path)]) == 2


class TestCmdSimulate:
    def _config(self, tmp_path, text):
        path = tmp_path / "grid.cfg"
        path.write_text(text)
        return str(path)

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = self._config(
            tmp_path, "n_per_arm = 60\ndispersion_sd = 2.4\nreplicates = 2\n"
        )
        out_a = tmp_path / "s1"
        out_b = tmp_path / "s2"
        assert main(["simulate", cfg, "--seed", "9", "--out-dir", str(out_a)]) == 0
        assert main(["simulate", cfg, "--seed", "9", "--out-dir", str(out_b)]) == 0
        for name in ("replicates.csv", "summary.csv", "grid_summary.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_grid_cross_product_accepted(self, tmp_path):
        cfg = self._config(
            tmp_path,
            "n_per_arm = 60, 80\ndispersion_sd = 1.6, 2.4\n"
            "prob_scenario = unequal, uniform\nreplicates = 1\n",
        )
        out = tmp_path / "grid"
        assert main(["simulate", cfg, "--seed", "3", "--out-dir", str(out)]) == 0
        with open(out / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8

    def test_misspec_shapes_run_against_baseline(self, tmp_path):
        cfg = self._config(
            tmp_path,
            "n_per_arm = 60\ndispersion_sd = 2.4\nreplicates = 1\n"
            "shapes = heavy_tail:10, skewed:1\n",
        )
        out = tmp_path / "mis"
        assert main(["simulate", cfg, "--seed", "4", "--out-dir", str(out)]) == 0
        payload = json.loads((out / "grid_summary.json").read_text())
        deg = payload["misspecification"][0]["degradation"]
        assert set(deg) == {"heavy_tail:10", "skewed:1"}

    def test_invalid_config_exits_2(self, tmp_path):
        cfg = self._config(tmp_path, "翻 = 1\n")
        assert main(["simulate", cfg, "--seed", "1", "--out-dir", str(tmp_path)]) == 2
        cfg = self._config(tmp_path, "n_per_arm = -5\n")
        assert main(["simulate", cfg, "--seed", "1", "--out-dir", str(tmp_path)]) == 2

    def test_read_sim_config_defaults(self, tmp_path):
        cfg = self._config(tmp_path, "n_per_arm = 100\n# comment\n")
        configs, shapes = read_sim_config(cfg, seed=5)
        assert shapes is None
        assert len(configs) == 1
        assert configs[0].seed == 5
        assert configs[0].prob_scenario == "unequal"

    def test_smoke_run_is_fast(self, tmp_path):
        import time

        cfg = self._config(
            tmp_path, "n_per_arm = 100\ndispersion_sd = 2.4\nreplicates = 1\n"
        )
        out = tmp_path / "smoke"
        start = time.time()
        assert main(["simulate", cfg, "--seed", "2", "--out-dir", str(out)]) == 0
        assert time.time() - start < 5.0
