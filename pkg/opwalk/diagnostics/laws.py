"""Walk law diagnostics: propagate, annealed, hits."""

import math
from dataclasses import replace

import numpy as np

from opwalk.diagnostics.common import annealed_seed, iter_fields, walk_model
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import (
    dependency_cone,
    estimate_annealed,
    hitting_curve,
    plan_window,
    propagate_quenched,
)
from opwalk.utils.config import ExperimentConfig
from opwalk.utils.defaults import Tolerance, Window
from opwalk.utils.stats import loglinear_fit


def propagate_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Exact quenched law of X_n from (0, 0) on every field; the first is written out."""
    report = DiagnosticReport(config)
    model = walk_model(config)
    plan = plan_window(model, None, config.n)
    start = ((0,) * config.d, 0)
    worst = 0.0
    for i, (seed, field) in enumerate(iter_fields(config, plan, report, desc="propagate")):
        law = propagate_quenched(field, start, config.n)
        drift = abs(law.total() - 1.0)
        worst = max(worst, drift)
        report.add("mass_drift", drift, n=config.n, seed=seed)
        report.add("support_size", float(np.count_nonzero(law.mass)), n=config.n, seed=seed)
        if i == 0:
            report.add_table("slice", law.to_frame(), law.metadata())
    report.add_check("mass_conserved", worst <= Tolerance.EXACT)
    return report


def annealed_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    Annealed law of X_n from (0, 0) in the configured mode.

    In Monte Carlo mode, small cones are also enumerated exactly and the
    largest deviation from a horizon-n Monte Carlo run is reported in
    standard errors.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    start = ((0,) * config.d, 0)
    law = estimate_annealed(model, start, config.n, mode=config.mode, reps=config.reps,
                            base_seed=annealed_seed(config), threads=config.threads, progress=True)
    report.add_table("annealed", law.to_frame(), law.metadata())
    report.add("annealed_mass", law.total(), n=config.n)
    if config.mode == "mc" and dependency_cone(config.d, config.n).sum() <= Window.EXACT_MAX_SITES:
        exact = estimate_annealed(model, start, config.n, mode="exact")
        # enumeration truncates the backbone at time n, so compare with the same horizon
        shallow = estimate_annealed(replace(model, horizon_margin=0), start, config.n, reps=config.reps,
                                    base_seed=annealed_seed(config), threads=config.threads)
        mc = shallow.reindexed(exact.lower, exact.shape)
        diff = np.abs(mc.mass - exact.mass)
        sigmas = np.divide(diff, mc.stderr, out=np.where(diff > Tolerance.EXACT, np.inf, 0.0), where=mc.stderr > 0)
        worst = float(sigmas.max())
        report.add("exact_deviation_sigmas", worst, n=config.n)
        report.add_check("matches_exact", worst <= 4.0)
    return report


def hits_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    Frequency of never touching the backbone in steps 1..n, and its log-linear decay.

    The fitted slope is reported as an extra row of the same statistic
    (group ``slope``).
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    curve = hitting_curve(model, config.n_values, config.reps, annealed_seed(config), config.threads)
    for row in curve.itertuples(index=False):
        log_value = math.log(row.value) if row.value > 0 else math.nan
        log_err = row.stderr / row.value if row.value > 0 else math.nan
        report.add("hits_log_frequency", log_value, log_err, n=int(row.n), group="curve")
    report.add_table("hits", curve)
    if len(curve) >= 2:
        fit = loglinear_fit(curve["n"], curve["value"])
        report.add("hits_log_frequency", fit.slope, fit.stderr, group="slope")
        report.add("hits_fit_r_squared", fit.r_squared)
        report.add_check("hits_decay", fit.slope < 0 and fit.r_squared >= 0.95)
    return report
