import json
import runpy
import sys

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from opwalk.opwalk import main
from opwalk.services.environment import sample_environment
from opwalk.services.runner import (
    PLOT_COLUMNS,
    REPORT_COLUMNS,
    DiagnosticReport,
    emit_plotdata,
    load_figure,
    plot_series,
    run_experiment,
    seed_set,
    summarize,
)
from opwalk.utils.config import build_config
from opwalk.utils.errors import UnknownExperimentError


@pytest.fixture
def propagate_config(tmp_path):
    return build_config({"experiment": "propagate", "p": 1.0, "n": 2, "seeds": 2, "out_dir": tmp_path})


def test_propagate_run_writes_its_files(propagate_config):
    report = run_experiment(propagate_config)
    directory = report.directory()
    for name in ("report.csv", "report.json", "config.ini", "slice.csv", "slice.meta.json"):
        assert (directory / name).exists()
    slice_table = pd.read_csv(directory / "slice.csv")
    np.testing.assert_allclose(slice_table["mass"], np.array([1, 2, 3, 2, 1]) / 9.0)
    assert slice_table["x1"].tolist() == [-2, -1, 0, 1, 2]
    assert report.checks == {"mass_conserved": True}
    meta = json.loads((directory / "report.json").read_text())
    assert meta["run_id"] == propagate_config.run_id
    assert len(meta["fingerprints"]) == 2
    assert "created_at_utc" in meta


def test_report_round_trip(propagate_config):
    report = run_experiment(propagate_config)
    loaded = DiagnosticReport.from_csv(report.directory())
    assert loaded.config == propagate_config
    assert loaded.checks == report.checks
    assert list(loaded.frame().columns) == REPORT_COLUMNS
    pd.testing.assert_frame_equal(loaded.frame(), report.frame(), check_dtype=False)
    assert set(loaded.tables) == {"slice"}


def test_report_rows_are_deterministic(propagate_config, tmp_path):
    first = run_experiment(propagate_config, write=False).frame()
    second = run_experiment(propagate_config, write=False).frame()
    pd.testing.assert_frame_equal(first, second)
    assert not (tmp_path / f"propagate-{propagate_config.run_id}").exists()


def test_aggregate_rows_carry_the_seed_set():
    config = build_config({"experiment": "lclt", "seed_base": 5, "seeds": 12})
    report = DiagnosticReport(config)
    report.add("lclt_error", 0.1, n=10)
    report.add("lclt_error", 0.2, n=10, seed=77)
    assert report.frame()["seed"].tolist() == [seed_set(5, 12), "77"]
    assert seed_set(5, 12) == "5+12"


def test_unknown_experiment(tmp_path):
    with pytest.raises(UnknownExperimentError):
        run_experiment(build_config({"experiment": "nope", "out_dir": tmp_path}))


def test_missing_statistic_gives_header_only_plot(propagate_config):
    report = run_experiment(propagate_config)
    series = emit_plotdata(report, "not_a_statistic")
    assert series.empty
    written = pd.read_csv(report.directory() / "plots" / "not_a_statistic.csv")
    assert list(written.columns) == PLOT_COLUMNS
    assert written.empty


def test_plot_series_and_figure(propagate_config):
    report = run_experiment(propagate_config)
    series = plot_series(report, "support_size")
    assert list(series.columns) == PLOT_COLUMNS
    assert series["group"].unique().tolist() == ["support_size"]
    assert series["y"].tolist() == [5.0, 5.0]
    emit_plotdata(report, "support_size", log_y=True)
    figure = load_figure(report.directory(), "support_size")
    assert figure.layout.xaxis.title.text == "n"
    assert figure.layout.yaxis.type == "log"
    missing = load_figure(report.directory(), "absent")
    assert "not found" in missing.layout.title.text


def test_summary_format(propagate_config):
    report = run_experiment(propagate_config, write=False)
    summary = summarize(report)
    assert set(summary) == {"created_at_utc", "config", "metrics", "checks"}
    assert summary["metrics"]["support_size"] == 5.0
    assert summary["config"]["experiment"] == "propagate"
    assert set(summarize(report, ["mass_drift"])["metrics"]) == {"mass_drift"}


def test_fingerprints_depend_on_bits():
    report = DiagnosticReport(build_config({"experiment": "gen"}))
    a = report.fingerprint(sample_environment(1, 4, (0, 4), 0.5, seed=1))
    b = report.fingerprint(sample_environment(1, 4, (0, 4), 0.5, seed=1))
    c = report.fingerprint(sample_environment(1, 4, (0, 4), 0.5, seed=2))
    assert a == b != c


# ----------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------

def test_cli_success(tmp_path):
    summary = tmp_path / "summary.json"
    result = CliRunner().invoke(main, ["propagate", "--p", "1.0", "--n", "2", "--seeds", "2",
                                       "--out", str(tmp_path), "--summary", str(summary)])
    assert result.exit_code == 0, result.output
    assert "mass_conserved" in result.output
    assert json.loads(summary.read_text())["metrics"]["support_size"] == 5.0


def test_cli_reads_config_file(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text("[common]\np = 0.0\nn = 3\nseeds = 1\n")
    result = CliRunner().invoke(main, ["propagate", "--config", str(config), "--out", str(tmp_path),
                                       "--plot", "support_size"])
    assert result.exit_code == 0, result.output
    assert list(tmp_path.glob("propagate-*/plots/support_size.csv"))


def test_module_entry_point(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(sys, "argv", ["opwalk", "propagate", "--p", "1.0", "--n", "2", "--seeds", "1",
                                      "--out", str(tmp_path)])
    with pytest.raises(SystemExit) as exit_info:
        runpy.run_module("opwalk", run_name="__main__")
    assert exit_info.value.code == 0
    assert "mass_conserved" in capsys.readouterr().out


def test_usage_names_the_command():
    result = CliRunner().invoke(main, ["--help"], prog_name="opwalk")
    assert result.output.startswith("Usage: opwalk [OPTIONS] ")


def test_cli_configuration_error(tmp_path):
    result = CliRunner().invoke(main, ["propagate", "--p", "1.5", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "error:" in result.output


@pytest.mark.parametrize("flags, code", [([], 0), (["--hard-checks"], 1)])
def test_cli_failed_checks(tmp_path, flags, code):
    result = CliRunner().invoke(main, ["pc", "--p", "0.05", "--n", "5", "--seeds", "5",
                                       "--out", str(tmp_path)] + flags)
    assert result.exit_code == code, result.output
    assert "FAIL" in result.output
