import csv
import json

import numpy as np
import pytest
import yaml

from btm import fixtures
from btm.cli import main, resolve_config, build_parser
from btm.data import read_observations

MCPR6 = str(fixtures.path("mcpr_synthetic_6.csv"))
TFR4 = str(fixtures.path("tfr_synthetic_4.csv"))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_yaml(path, payload):
    path.write_text(yaml.safe_dump(payload))
    return str(path)


class TestSimulate:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["simulate", "--out", str(tmp_path / name), "--seed", "5"]) == 0
        for f in ("data.csv", "truth.csv", "truth_parameters.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert main(["simulate", "--out", str(tmp_path / "c"), "--seed", "6"]) == 0
        assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "c" / "data.csv").read_bytes()

    def test_one_observation_per_country(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", {"simulate": {"n_obs": [1, 1]}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        obs, hier = read_observations(tmp_path / "o" / "data.csv")
        assert sorted(obs.country.tolist()) == sorted(hier.countries)

    def test_zero_noise(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", {"simulate": {"noise": False}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        truth = {(r["country"], int(r["year"])): float(r["eta"])
                 for r in read_rows(tmp_path / "o" / "truth.csv")}
        for r in read_rows(tmp_path / "o" / "data.csv"):
            assert float(r["value"]) == pytest.approx(truth[(r["country"], int(r["year_start"]))], abs=1e-9)

    def test_tfr(self, tmp_path):
        assert main(["simulate", "--model", "tfr_bspline", "--out", str(tmp_path)]) == 0
        truth = json.loads((tmp_path / "truth.json").read_text())
        assert truth["tau"] == 0.1
        assert {r["country"] for r in read_rows(tmp_path / "data.csv")} == {"C1", "C2", "C3", "C4"}

    def test_config_round_trip(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path / "a"), "--seed", "9", "--knots", "6"]) == 0
        saved = yaml.safe_load((tmp_path / "a" / "config.yaml").read_text())
        assert saved["command"] == "simulate" and saved["spline"]["K"] == 6
        saved["paths"]["out"] = str(tmp_path / "b")
        cfg = write_yaml(tmp_path / "replay.yaml", saved)
        assert main(["simulate", "--config", cfg]) == 0
        assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", {"sampler": {"chains": 3, "warmup": 10}})
        args = build_parser().parse_args(["fit", "--config", cfg, "--chains", "2"])
        resolved = resolve_config(args)
        assert resolved["sampler"]["chains"] == 2 and resolved["sampler"]["warmup"] == 10

    def test_preset(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", {"sampler": {"preset": "validation", "chains": 2}})
        resolved = resolve_config(build_parser().parse_args(["fit", "--config", cfg]))
        assert resolved["sampler"]["warmup"] == 250 and resolved["sampler"]["chains"] == 2
        assert resolved["sampler"]["adapt_delta"] == 0.999

    def test_tfr_default_spline(self):
        resolved = resolve_config(build_parser().parse_args(["fit", "--model", "tfr_bspline"]))
        assert resolved["spline"] == {"K": 7, "d": 2}

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"samplr": {}})
        assert main(["simulate", "--config", cfg]) == 2
        assert "samplr" in capsys.readouterr().err

    def test_missing_data_exit_2(self, tmp_path):
        assert main(["fit", "--out", str(tmp_path)]) == 2
        assert main(["fit", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2

    def test_bad_sampler_value_exit_2(self, tmp_path):
        assert main(["fit", "--data", MCPR6, "--adapt-delta", "1.5", "--out", str(tmp_path)]) == 2


class TestData:
    def test_unknown_source_names_row(self, tmp_path, capsys):
        text = (fixtures.path("mcpr_synthetic_6.csv")).read_text().splitlines()
        text[3] = text[3].rsplit(",", 1)[0] + ",Census"
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(text) + "\n")
        assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "o")]) == 3
        err = capsys.readouterr().err
        assert "bad.csv:4:" in err and "Census" in err

    def test_non_numeric_value(self, tmp_path, capsys):
        text = (fixtures.path("mcpr_synthetic_6.csv")).read_text().splitlines()
        parts = text[2].split(",")
        parts[5] = "abc"
        text[2] = ",".join(parts)
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(text) + "\n")
        assert main(["fit", "--data", str(bad), "--out", str(tmp_path / "o")]) == 3
        assert "bad.csv:3:" in capsys.readouterr().err


class TestTfrFit:
    def test_fit_project_summarize(self, tmp_path, capsys):
        out = str(tmp_path / "fit")
        args = ["--model", "tfr_bspline", "--data", TFR4, "--out", out, "--chains", "2",
                "--warmup", "200", "--samples", "200", "--seed", "3"]
        assert main(["fit", *args]) == 0
        for f in ("draws.csv", "transitions.csv", "projections.csv", "hyperparameters.csv",
                  "diagnostics.json", "config.yaml"):
            assert (tmp_path / "fit" / f).is_file()
        proj = read_rows(tmp_path / "fit" / "projections.csv")
        assert min(float(r["q2.5"]) for r in proj) >= 1.0
        assert max(int(r["period_start"]) for r in proj) == 2095
        first = (tmp_path / "fit" / "projections.csv").read_bytes()
        assert main(["project", *args]) == 0
        assert (tmp_path / "fit" / "projections.csv").read_bytes() == first
        assert main(["summarize", *args]) == 0
        assert "tau" in capsys.readouterr().out
        assert json.loads((tmp_path / "fit" / "summary.json").read_text())["draws"] == [2, 200, 13]

    def test_rerun_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["fit", "--model", "tfr_bspline", "--data", TFR4, "--out", str(tmp_path / name),
                         "--chains", "2", "--warmup", "100", "--samples", "50", "--seed", "8",
                         "--allow-nonconverged"]) == 0
        for f in ("transitions.csv", "projections.csv", "draws.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_validate_rejects_tfr(self, tmp_path):
        assert main(["validate", "--model", "tfr_bspline", "--data", TFR4, "--out", str(tmp_path)]) == 2


class TestMcprFit:
    def test_nonconverged_exit_4(self, tmp_path, capsys):
        args = ["fit", "--data", MCPR6, "--out", str(tmp_path / "o"), "--chains", "2",
                "--warmup", "0", "--samples", "8", "--seed", "1"]
        assert main(args) == 4
        assert "R-hat" in capsys.readouterr().err
        assert (tmp_path / "o" / "diagnostics.json").is_file()
        assert main(args + ["--allow-nonconverged"]) == 0

    def test_cutoff_beyond_data_not_applicable(self, tmp_path):
        assert main(["validate", "--data", MCPR6, "--out", str(tmp_path), "--holdout", "cutoff",
                     "--cutoff-year", "2030", "--chains", "1", "--warmup", "20", "--samples", "10"]) == 0
        report = json.loads((tmp_path / "validation.json").read_text())[0]
        assert report["applicable"] is False and report["n_eligible"] == 0

    def test_cutoff_off_grid(self, tmp_path):
        assert main(["validate", "--data", MCPR6, "--out", str(tmp_path), "--holdout", "cutoff",
                     "--cutoff-year", "2040"]) == 2

    def test_single_repetition_equals_run(self, tmp_path):
        assert main(["validate", "--data", MCPR6, "--out", str(tmp_path), "--holdout", "random",
                     "--repetitions", "1", "--chains", "1", "--warmup", "30", "--samples", "20"]) == 0
        rows = read_rows(tmp_path / "validation_table1.csv")
        assert len(rows) == 2
        for k in rows[0]:
            if k != "label":
                assert rows[0][k] == rows[1][k]
        assert rows[0]["label"] == "mcpr_bspline"

    @pytest.mark.slow
    def test_fit_bundled_fixture(self, tmp_path):
        out = tmp_path / "fit"
        args = ["--data", MCPR6, "--out", str(out), "--chains", "4", "--warmup", "200",
                "--samples", "200", "--seed", "1"]
        assert main(["fit", *args]) == 0
        for f in ("draws.csv", "trajectories.csv", "transitions.csv", "hyperparameters.csv",
                  "diagnostics.json", "config.yaml"):
            assert (out / f).is_file()
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["max_rhat"] <= 1.05 and diag["converged"]
        traj = read_rows(out / "trajectories.csv")
        assert len(traj) == 6 * 61
        q = np.array([[float(r[c]) for c in ("q2.5", "q10", "q25", "q50", "q75", "q90", "q97.5")]
                      for r in traj])
        assert np.all(np.diff(q, axis=1) >= 0)
        trans = read_rows(out / "transitions.csv")
        assert {r["level"] for r in trans} == {"country", "subregion", "region"}
        assert len(trans) == 200 * (6 + 2 + 1)
        first = (out / "trajectories.csv").read_bytes()
        assert main(["project", *args]) == 0
        assert (out / "trajectories.csv").read_bytes() == first
