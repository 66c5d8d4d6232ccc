"""
Experiment runner: diagnostic reports, their files and plot data.

A run writes into ``<out_dir>/<experiment>-<run_id>/``:

    report.csv        one row per statistic (deterministic body)
    report.json       wall clock, timestamps, fingerprints, checks
    config.ini        the configuration echo
    <table>.csv       experiment tables (slices, ladders, ...)
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from opwalk.services.environment import EnvironmentWindow
from opwalk.utils.config import ExperimentConfig, read_config, write_config
from opwalk.utils.errors import UnknownExperimentError
from opwalk.utils.io import write_sidecar, write_table
from opwalk.utils.logging import get_logger

logger = get_logger(__name__)

REPORT_COLUMNS = ["run_id", "statistic", "group", "n", "p", "d", "seed", "value", "stderr"]
PLOT_COLUMNS = ["x", "y", "group", "stderr"]


def seed_set(seed_base: int, count: int) -> str:
    """Label of the derived seeds r = 0 .. count-1 of ``seed_base``."""
    return f"{seed_base}+{count}"


# ======================================================================
# REPORT
# ======================================================================

@dataclass
class DiagnosticReport:
    """Rows of one experiment run plus its tables and provenance."""

    config: ExperimentConfig
    rows: List[Dict[str, Any]] = field(default_factory=list)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    fingerprints: List[str] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    sidecars: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    wall_clock: Optional[float] = None

    @property
    def run_id(self) -> str:
        return self.config.run_id

    def add(self, statistic: str, value: float, stderr: float = math.nan, n: Optional[int] = None,
            seed: Any = None, group: str = "") -> None:
        """
        Append one statistic.

        ``seed`` is the derived field seed for per-field rows; aggregates
        default to the seed set of the whole run.
        """
        if seed is None:
            seed = seed_set(self.config.seed_base, self.config.seeds)
        self.rows.append({
            "run_id": self.run_id, "statistic": statistic, "group": group,
            "n": n if n is not None else math.nan, "p": self.config.p, "d": self.config.d,
            "seed": str(seed), "value": float(value), "stderr": float(stderr),
        })

    def add_table(self, name: str, frame: pd.DataFrame, metadata: Optional[Dict[str, Any]] = None) -> None:
        self.tables[name] = frame
        if metadata is not None:
            self.sidecars[name] = metadata

    def add_check(self, name: str, passed: bool) -> None:
        self.checks[name] = bool(passed)
        if not passed:
            logger.warning("check failed", extra={"context": name})

    def fingerprint(self, env: EnvironmentWindow) -> str:
        """Record sha256 of a window's packed occupancy."""
        digest = hashlib.sha256(np.ascontiguousarray(env.packed).tobytes()).hexdigest()
        self.fingerprints.append(digest)
        return digest

    @property
    def failed_checks(self) -> List[str]:
        return [name for name, ok in self.checks.items() if not ok]

    def frame(self, statistic: Optional[str] = None) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=REPORT_COLUMNS)
        if statistic is not None:
            frame = frame[frame["statistic"] == statistic]
        return frame.reset_index(drop=True)

    def finish(self) -> "DiagnosticReport":
        self.wall_clock = time.time() - self.started
        return self

    def directory(self, out_dir: Optional[Path] = None) -> Path:
        root = Path(out_dir) if out_dir is not None else Path(self.config.out_dir)
        return root / f"{self.config.experiment}-{self.run_id}"

    def to_csv(self, out_dir: Optional[Path] = None) -> Path:
        """Write report.csv, the tables, report.json and config.ini; return the run directory."""
        directory = self.directory(out_dir)
        write_table(directory / "report.csv", self.frame())
        for name, table in self.tables.items():
            path = write_table(directory / f"{name}.csv", table)
            if name in self.sidecars:
                write_sidecar(path, self.sidecars[name])
        write_config(self.config, directory / "config.ini")
        (directory / "report.json").write_text(json.dumps({
            "run_id": self.run_id,
            "experiment": self.config.experiment,
            "created_at_utc": datetime.now(timezone.utc).isoformat(),
            "wall_clock_s": self.wall_clock,
            "fingerprints": self.fingerprints,
            "checks": self.checks,
            "tables": sorted(self.tables),
        }, indent=2, sort_keys=True))
        return directory

    @classmethod
    def from_csv(cls, directory: Path) -> "DiagnosticReport":
        """Read back a run directory written by :meth:`to_csv`."""
        directory = Path(directory)
        config = read_config(directory / "config.ini")
        text_columns = {"run_id": str, "statistic": str, "seed": str, "group": str}
        frame = pd.read_csv(directory / "report.csv", dtype=text_columns, keep_default_na=False, na_values=[""])
        frame["group"] = frame["group"].fillna("")
        meta = json.loads((directory / "report.json").read_text())
        tables = {name: pd.read_csv(directory / f"{name}.csv") for name in meta.get("tables", [])}
        return cls(config=config, rows=frame.to_dict("records"), tables=tables,
                   fingerprints=list(meta.get("fingerprints", [])), checks=dict(meta.get("checks", {})),
                   wall_clock=meta.get("wall_clock_s"))


# ======================================================================
# RUNNING
# ======================================================================

def run_experiment(config: ExperimentConfig, write: bool = True) -> DiagnosticReport:
    """
    Run the diagnostic named by ``config.experiment``.

    Raises:
        UnknownExperimentError: no diagnostic of that name
    """
    from opwalk.diagnostics import EXPERIMENTS

    diagnostic = EXPERIMENTS.get(config.experiment)
    if diagnostic is None:
        raise UnknownExperimentError(f"unknown experiment {config.experiment!r}; "
                                     f"choose one of {', '.join(sorted(EXPERIMENTS))}")
    logger.info("experiment started", extra={"context": config.experiment, "d": config.d, "p": config.p})
    report = diagnostic(config).finish()
    if write:
        directory = report.to_csv()
        logger.info("experiment written", extra={"context": str(directory)})
    return report


# ======================================================================
# PLOT DATA
# ======================================================================

def plot_series(report: DiagnosticReport, statistic: str, x: str = "n") -> pd.DataFrame:
    """Long-format series (x, y, group, stderr) of one statistic."""
    rows = report.frame(statistic)
    if rows.empty:
        return pd.DataFrame(columns=PLOT_COLUMNS)
    return pd.DataFrame({
        "x": rows[x].to_numpy(dtype=float),
        "y": rows["value"].to_numpy(dtype=float),
        "group": rows["group"].where(rows["group"] != "", statistic).to_numpy(),
        "stderr": rows["stderr"].to_numpy(dtype=float),
    }, columns=PLOT_COLUMNS)


def build_figure(series: pd.DataFrame, title: str, x_title: str = "n", y_title: str = "value",
                 log_y: bool = False) -> go.Figure:
    fig = go.Figure()
    for group, part in series.groupby("group", sort=True):
        part = part.dropna(subset=["x"])
        if part.empty:
            continue
        fig.add_trace(go.Scatter(
            x=part["x"], y=part["y"], mode="lines+markers", name=str(group),
            error_y=dict(type="data", array=part["stderr"].fillna(0.0), visible=True),
        ))
    fig.update_layout(
        title={"text": title, "x": 0.5, "xanchor": "center"},
        xaxis_title=x_title,
        yaxis_title=y_title,
        template="plotly_white",
        hovermode="x unified",
        margin=dict(l=60, r=40, t=80, b=60),
    )
    if log_y:
        fig.update_yaxes(type="log")
    return fig


def emit_plotdata(report: DiagnosticReport, statistic: str, x: str = "n",
                  out_dir: Optional[Path] = None, log_y: bool = False) -> pd.DataFrame:
    """
    Write ``plots/<statistic>.csv`` and the matching plotly figure JSON.

    A statistic absent from the report gives a header-only CSV.
    """
    series = plot_series(report, statistic, x)
    directory = report.directory(out_dir) / "plots"
    write_table(directory / f"{statistic}.csv", series)
    figure = build_figure(series, statistic, x_title=x, log_y=log_y)
    (directory / f"{statistic}.json").write_text(figure.to_json())
    return series


def load_figure(directory: Path, statistic: str) -> go.Figure:
    """Figure written by :func:`emit_plotdata`; an empty titled figure when missing."""
    path = Path(directory) / "plots" / f"{statistic}.json"
    if not path.exists():
        return go.Figure().update_layout(title=f"Plot '{statistic}' not found")
    return go.Figure(json.loads(path.read_text()))


def summarize(report: DiagnosticReport, statistics: Sequence[str] = ()) -> Dict[str, Any]:
    """Summary in the results/ JSON format: timestamp, config and per-statistic medians."""
    frame = report.frame()
    chosen = statistics or sorted(frame["statistic"].unique())
    metrics = {name: float(frame.loc[frame["statistic"] == name, "value"].median()) for name in chosen}
    return {
        "created_at_utc": datetime.now(timezone.utc).isoformat(),
        "config": report.config.to_ini_dict(),
        "metrics": metrics,
        "checks": report.checks,
    }
