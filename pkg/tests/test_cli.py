import csv
import json

import pytest

from saekit import __version__
from saekit.cli import EXIT_NONCONVERGENCE, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, cli
from saekit.frame import Domain
from saekit.io import write_area_level, write_frame
from saekit.simulate import AreaSimConfig, UnitSimConfig, gen_area_level, gen_unit_level


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def survey(tmp_path_factory):
    d = tmp_path_factory.mktemp("survey")
    frame, _ = gen_unit_level(UnitSimConfig(seed=3, plots_per_stratum=10, n_years=21, first_year=1999))
    units = sorted(frame.units)
    domains = [Domain("north", (units[0],), frame.units[units[0]].area),
               Domain("south", (units[1],), frame.units[units[1]].area)]
    write_frame(frame, domains, d)
    return d


@pytest.fixture(scope="module")
def area(tmp_path_factory):
    d = tmp_path_factory.mktemp("area")
    data, _ = gen_area_level(AreaSimConfig(seed=2, n_domains=30))
    write_area_level(data, d)
    # one zero-variance domain that must be excluded
    with open(d / "direct.csv", "a", encoding="utf-8") as fh:
        fh.write("ZERO,0,0\n")
    with open(d / "covariates.csv", "a", encoding="utf-8") as fh:
        fh.write("ZERO," + ",".join(["0"] * (data.X.shape[1] - 1)) + "\n")
    return d, data


def frame_args(d):
    return ["--plots", str(d / "plots.csv"), "--strata", str(d / "strata.csv"), "--units", str(d / "units.csv")]


def area_args(d):
    return ["--direct", str(d / "direct.csv"), "--covariates", str(d / "covariates.csv"),
            "--adjacency", str(d / "adjacency.csv")]


class TestDirect:
    def test_pool_one_row_per_domain(self, survey, tmp_path):
        assert cli(["direct", *frame_args(survey), "--pool", "2015:2019", "--out", str(tmp_path)]) == EXIT_OK
        out = rows(tmp_path / "direct_estimates.csv")
        assert [r["domain_id"] for r in out] == ["north", "south"]
        assert all(r["period"] == "2015:2019" for r in out)

    def test_annual(self, survey, tmp_path):
        assert cli(["direct", *frame_args(survey), "--annual", "2010:2012", "--out", str(tmp_path)]) == EXIT_OK
        out = rows(tmp_path / "direct_estimates.csv")
        assert len(out) == 6 and {r["year"] for r in out} == {"2010", "2011", "2012"}

    def test_sidecar(self, survey, tmp_path):
        cli(["direct", *frame_args(survey), "--pool", "2015:2019", "--out", str(tmp_path)])
        meta = json.loads((tmp_path / "direct_estimates.meta.json").read_text())
        assert meta["version"] == __version__ and meta["software"] == "saekit"
        assert meta["config"]["pool"] == [2015, 2019]
        assert "threads" not in meta["config"]
        assert isinstance(meta["flags"], list)

    def test_json_format(self, survey, tmp_path):
        cli(["direct", *frame_args(survey), "--pool", "2015:2019", "--format", "json", "--out", str(tmp_path)])
        out = json.loads((tmp_path / "direct_estimates.json").read_text())
        assert len(out) == 2 and out[0]["domain_id"] == "north"

    def test_pool_and_annual_exclusive(self, survey, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            cli(["direct", *frame_args(survey), "--pool", "2015:2019", "--annual", "2015:2019",
                 "--out", str(tmp_path)])
        assert info.value.code == EXIT_USAGE


class TestFH:
    def test_row_count_excludes_zero_variance(self, area, tmp_path):
        d, data = area
        assert cli(["fh", *area_args(d), "--out", str(tmp_path)]) == EXIT_OK
        out = rows(tmp_path / "fh_domains.csv")
        assert len(out) == data.n_domains
        assert "ZERO" not in {r["domain_id"] for r in out}
        meta = json.loads((tmp_path / "fh_domains.meta.json").read_text())
        assert meta["excluded_domains"] == ["ZERO"]
        params = {r["parameter"]: float(r["estimate"]) for r in rows(tmp_path / "fh_parameters.csv")}
        assert {"sigma2", "rho", "beta_intercept"} <= set(params)

    def test_mse_components_add_up(self, area, tmp_path):
        d, _ = area
        cli(["fh", *area_args(d), "--out", str(tmp_path)])
        for r in rows(tmp_path / "fh_domains.csv"):
            parts = float(r["g1"]) + float(r["g2"]) + 2 * float(r["g3"])
            assert float(r["mse"]) == pytest.approx(parts, rel=1e-9)

    def test_nonconvergence_exit(self, area, tmp_path):
        d, _ = area
        assert cli(["fh", *area_args(d), "--max-iter", "2", "--out", str(tmp_path)]) == EXIT_NONCONVERGENCE
        assert (tmp_path / "fh_parameters.csv").exists()
        meta = json.loads((tmp_path / "fh_domains.meta.json").read_text())
        assert meta["converged"] is False


class TestTrend:
    def test_forecast_span(self, survey, tmp_path):
        code = cli(["trend", *frame_args(survey), "--forecast", "2025", "--chains", "2", "--iter", "600",
                    "--draws", "20", "--seed", "1", "--out", str(tmp_path)])
        assert code in (EXIT_OK, EXIT_NONCONVERGENCE)
        out = rows(tmp_path / "trend.csv")
        years = [int(r["year"]) for r in out]
        assert years == list(range(1999, 2026))
        assert [r["forecast"] for r in out].count("true") == 2025 - 2019
        traj = rows(tmp_path / "trajectories.csv")
        assert len(traj) == 20 * len(years)
        for name in ("precision_comparison", "posterior_summary", "draws"):
            assert (tmp_path / f"{name}.csv").exists()
            assert (tmp_path / f"{name}.meta.json").exists()

    def test_env_seed_fallback(self, survey, tmp_path, monkeypatch):
        base = [*frame_args(survey), "--chains", "2", "--iter", "200", "--draws", "5"]
        monkeypatch.setenv("SAEKIT_SEED", "7")
        cli(["trend", *base, "--out", str(tmp_path / "env")])
        monkeypatch.delenv("SAEKIT_SEED")
        cli(["trend", *base, "--seed", "7", "--out", str(tmp_path / "flag")])
        cli(["trend", *base, "--seed", "8", "--out", str(tmp_path / "other")])
        a = (tmp_path / "env" / "draws.csv").read_bytes()
        assert a == (tmp_path / "flag" / "draws.csv").read_bytes()
        assert a != (tmp_path / "other" / "draws.csv").read_bytes()
        assert json.loads((tmp_path / "env" / "draws.meta.json").read_text())["seed"] == 7

    def test_bad_env_seed(self, survey, tmp_path, monkeypatch):
        monkeypatch.setenv("SAEKIT_SEED", "abc")
        assert cli(["trend", *frame_args(survey), "--iter", "100", "--out", str(tmp_path)]) == EXIT_VALIDATION


class TestSimulate:
    def test_summary_written(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_domains": 12}))
        code = cli(["simulate", "--study", "fh_recovery", "--config", str(cfg), "--reps", "50",
                    "--out", str(tmp_path)])
        assert code == EXIT_OK
        summary = {r["metric"]: r for r in rows(tmp_path / "fh_recovery_summary.csv")}
        assert "median_sigma2" in summary
        assert len(rows(tmp_path / "fh_recovery_replicates.csv")) == 50

    def test_seed_priority(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_domains": 10, "seed": 11}))
        monkeypatch.setenv("SAEKIT_SEED", "5")
        base = ["simulate", "--study", "fh_recovery", "--config", str(cfg), "--reps", "50"]
        cli([*base, "--out", str(tmp_path / "a")])
        cli([*base, "--seed", "3", "--out", str(tmp_path / "b")])
        seed = lambda p: json.loads((p / "fh_recovery_summary.meta.json").read_text())["seed"]
        assert seed(tmp_path / "a") == 11 and seed(tmp_path / "b") == 3

    def test_too_few_reps(self, tmp_path):
        assert cli(["simulate", "--study", "fh_recovery", "--reps", "10", "--out", str(tmp_path)]) == EXIT_VALIDATION

    def test_bad_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_domain": 10}))
        code = cli(["simulate", "--study", "fh_recovery", "--config", str(cfg), "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION


class TestExitCodes:
    @pytest.mark.parametrize("argv", [["bogus"], ["fh", "--nope"], [], ["direct", "--out", "x"]])
    def test_usage(self, argv, capsys):
        with pytest.raises(SystemExit) as info:
            cli(argv)
        assert info.value.code == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        code = cli(["fh", "--direct", str(tmp_path / "no.csv"), "--covariates", str(tmp_path / "c.csv"),
                    "--adjacency", str(tmp_path / "a.csv"), "--out", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_schema_error(self, area, tmp_path):
        d, _ = area
        bad = tmp_path / "direct.csv"
        bad.write_text("domain_id,mean\nA,1\n")
        code = cli(["fh", "--direct", str(bad), "--covariates", str(d / "covariates.csv"),
                    "--adjacency", str(d / "adjacency.csv"), "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION

    def test_zero_threads(self, area, tmp_path):
        d, _ = area
        with pytest.raises(SystemExit) as info:
            cli(["fh", *area_args(d), "--threads", "0", "--out", str(tmp_path)])
        assert info.value.code == EXIT_USAGE
