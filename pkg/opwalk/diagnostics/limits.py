"""Local limit diagnostics: qlclt, lclt, hybrid."""

import math
from collections import defaultdict

import numpy as np

from opwalk.diagnostics.common import add_medians, annealed_laws, iter_fields, walk_model
from opwalk.services.measures import (
    GaussianReference,
    ann_times_pre,
    box_average_deviation,
    estimate_sigma2,
    hybrid_decomposition,
    hybrid_scales,
    lclt_error,
    qlclt_error,
)
from opwalk.services.prefactor import cesaro_prefactor
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import plan_window, propagate_quenched
from opwalk.utils.config import ExperimentConfig
from opwalk.utils.errors import ConfigurationError
from opwalk.utils.stats import is_strictly_decreasing

# fraction of seeds whose normaliser must sit in [0.9, 1.1] at the largest n
Z_BAND = (0.9, 1.1)
Z_QUORUM = 0.8


def qlclt_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    sum_x |P_omega(X_n = x) - P(X_n = x) psi(x, n)| per seed and n.

    psi is the Cesaro prefactor of depth N_max; the normaliser Z of the
    annealed-times-prefactor measure is reported next to the error.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    times = sorted(set(config.n_values))
    annealed = annealed_laws(config, times)
    plan = plan_window(model, None, times[-1], lookback=config.N_max, spread=config.N_max)
    errors = defaultdict(list)
    last_Z = []
    for seed, field in iter_fields(config, plan, report, desc="qlclt"):
        for n in times:
            psi = cesaro_prefactor(field, n, config.N_max)
            quenched = propagate_quenched(field, ((0,) * config.d, 0), n)
            error = qlclt_error(quenched, annealed[n], psi)
            _, Z = ann_times_pre(annealed[n], psi)
            errors[n].append(error)
            report.add("qlclt_error", error, n=n, seed=seed)
            report.add("Z", Z, n=n, seed=seed)
            if n == times[-1]:
                last_Z.append(Z)
    medians = add_medians(report, "qlclt_error", errors)
    if len(times) > 1:
        report.add_check("qlclt_decreasing", is_strictly_decreasing(medians))
    inside = np.mean([Z_BAND[0] <= z <= Z_BAND[1] for z in last_Z])
    report.add("Z_in_band_fraction", float(inside), n=times[-1])
    report.add_check("Z_near_one", inside >= Z_QUORUM)
    return report


def lclt_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    Annealed law against the Gaussian with covariance sigma2 * n * I.

    sigma2 is 2/3 at p = 0 (the uniform step) and is fitted from the
    variance growth of the annealed laws otherwise.
    """
    report = DiagnosticReport(config)
    times = sorted(set(config.n_values))
    if config.p == 0.0:
        sigma2 = 2.0 / 3.0
        laws = annealed_laws(config, times)
    else:
        fit_times = sorted(set(times) | {max(1, times[-1] // 2)})
        if len(fit_times) < 2:
            raise ConfigurationError("lclt needs n >= 2 to fit sigma2")
        laws = annealed_laws(config, fit_times)
        estimate = estimate_sigma2([laws[t] for t in fit_times])
        sigma2 = estimate.sigma2
        report.add("sigma2_isotropy", estimate.isotropy)
    report.add("sigma2", sigma2)
    errors = []
    for n in times:
        error = lclt_error(laws[n], GaussianReference(config.d, sigma2, n))
        errors.append(error)
        report.add("lclt_error", error, n=n)
        if n >= 1:
            _, side = hybrid_scales(n, config.eps, config.delta)
            report.add("box_average_deviation", box_average_deviation(laws[n], side), n=n)
    if config.p == 0.0:
        report.add_check("lclt_small", errors[-1] < 0.05)
    elif len(times) > 1:
        report.add_check("lclt_decreasing", is_strictly_decreasing(errors))
    return report


def hybrid_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    L1, L2, L3 and the normaliser term per seed and n, with qlclt_error.

    The four terms bound qlclt_error by the triangle inequality; the
    bound is checked on every field.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    times = sorted(set(config.n_values))
    if times[0] < 1:
        raise ConfigurationError("hybrid limits need n >= 1")
    needed = set(times) | {n - hybrid_scales(n, config.eps, config.delta)[0] for n in times}
    annealed = annealed_laws(config, sorted(needed))
    plan = plan_window(model, None, times[-1], lookback=config.N_max, spread=config.N_max)
    per_term = {name: defaultdict(list) for name in ("L1", "L2", "L3")}
    slack = math.inf
    for seed, field in iter_fields(config, plan, report, desc="hybrid"):
        for n in times:
            result = hybrid_decomposition(field, n, config.eps, config.delta, annealed, config.N_max)
            for name, value in result.terms().items():
                report.add(name, value, n=n, seed=seed)
                if name in per_term:
                    per_term[name][n].append(value)
            report.add("qlclt_error", result.qlclt, n=n, seed=seed)
            report.add("degenerate_boxes", result.degenerate_boxes, n=n, seed=seed)
            slack = min(slack, result.bound() - result.qlclt)
    for name, values in per_term.items():
        medians = add_medians(report, name, values)
        if len(times) > 1:
            report.add_check(f"{name}_decreasing", is_strictly_decreasing(medians))
    report.add_check("triangle_bound", slack >= -1e-9)
    return report
