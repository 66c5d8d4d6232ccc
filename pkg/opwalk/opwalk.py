"""opwalk - backbone walk laboratory for supercritical oriented percolation."""

import json
import sys
from pathlib import Path

import click

from opwalk.diagnostics import DEFAULT_PLOTS, EXPERIMENTS
from opwalk.services.runner import emit_plotdata, run_experiment, summarize
from opwalk.utils.config import build_config, read_config
from opwalk.utils.errors import OpwalkError
from opwalk.utils.logging import configure_logging

EXIT_OK = 0
EXIT_FAILED_CHECKS = 1
EXIT_ERROR = 2


@click.command()
@click.argument("experiment", type=click.Choice(sorted(EXPERIMENTS)))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="INI file with a [common] section and per-experiment sections.")
@click.option("--d", type=click.IntRange(1, 3), default=None, help="Spatial dimension.")
@click.option("--p", type=float, default=None, help="Open-site probability.")
@click.option("--n", type=int, default=None, help="Walk length.")
@click.option("--n-list", default=None, help="Comma-separated list of n (or box sides).")
@click.option("--seeds", type=int, default=None, help="Number of environment seeds.")
@click.option("--seed-base", type=int, default=None, help="Base seed; field r uses derive_seed(base, r).")
@click.option("--reps", type=int, default=None, help="Monte Carlo repetitions for annealed laws.")
@click.option("--boundary", type=click.Choice(["open", "periodic"]), default=None)
@click.option("--mode", type=click.Choice(["exact", "mc"]), default=None, help="Annealed law mode.")
@click.option("--horizon-margin", type=int, default=None, help="Backbone horizon above the last walk time.")
@click.option("--threads", type=int, default=None, help="Monte Carlo worker processes.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output root; the run writes into <out>/<experiment>-<run_id>/.")
@click.option("--hard-checks", is_flag=True, default=False, help="Exit with status 1 when a check fails.")
@click.option("--plot", "plots", multiple=True, help="Statistic to emit plot data for (repeatable).")
@click.option("--summary", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Also write a JSON summary (created_at_utc, config, metrics).")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default=None)
def main(experiment, config_path, hard_checks, plots, summary, log_level, **flags):
    """Run one diagnostic EXPERIMENT and write its report."""
    configure_logging(log_level)
    overrides = {key: value for key, value in flags.items() if value is not None}
    if hard_checks:
        overrides["hard_checks"] = True
    try:
        if config_path is not None:
            config = read_config(config_path, experiment, overrides)
        else:
            config = build_config({"experiment": experiment, **overrides})
        report = run_experiment(config)
        directory = report.directory()
        statistics = plots or ((DEFAULT_PLOTS[experiment],) if experiment in DEFAULT_PLOTS else ())
        for statistic in statistics:
            emit_plotdata(report, statistic, log_y="error" in statistic)
        if summary is not None:
            summary.parent.mkdir(parents=True, exist_ok=True)
            summary.write_text(json.dumps(summarize(report), indent=2))
    except OpwalkError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)

    click.echo(f"{experiment}: {len(report.rows)} rows, {len(report.tables)} tables -> {directory}")
    for name, passed in sorted(report.checks.items()):
        click.echo(f"  {'ok  ' if passed else 'FAIL'} {name}")
    if report.failed_checks and config.hard_checks:
        sys.exit(EXIT_FAILED_CHECKS)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
