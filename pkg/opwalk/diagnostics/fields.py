"""Environment, backbone and cluster diagnostics: gen, backbone, intersect, survival, pc."""

import math
from collections import defaultdict

import joblib
import numpy as np

from opwalk.diagnostics.common import field_seeds, iter_fields, walk_model
from opwalk.services.cluster import (
    estimate_critical_p,
    intersection_time,
    slice_density,
    surrogate_disagreement,
    survival_gap,
    survival_probability,
    truncated_surrogate,
)
from opwalk.services.environment import sample_environment
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import plan_window
from opwalk.utils.config import ExperimentConfig, cache_directory
from opwalk.utils.defaults import Bounds
from opwalk.utils.stats import binomial_estimate, chi_square_pvalue, is_non_increasing, loglinear_fit


def gen_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Sample windows and test the open-site frequency against p."""
    report = DiagnosticReport(config)
    extent = config.n + config.spatial_margin
    opened = total = 0
    for seed in field_seeds(config):
        env = sample_environment(config.d, extent, (0, config.n), config.p, seed,
                                 boundary_mode=config.boundary)
        report.fingerprint(env)
        bits = env.occupancy
        report.add("open_fraction", float(bits.mean()), n=config.n, seed=seed)
        opened += int(bits.sum())
        total += bits.size
    if 0.0 < config.p < 1.0:
        pvalue = chi_square_pvalue(np.array([total - opened, opened]), np.array([1 - config.p, config.p]))
        report.add("open_fraction_pvalue", pvalue, n=config.n)
        report.add_check("open_fraction_consistent", pvalue > 1e-3)
    else:
        report.add_check("open_fraction_consistent", opened == (total if config.p == 1.0 else 0))
    return report


def backbone_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Backbone density per seed and the sensitivity of xi to the horizon."""
    report = DiagnosticReport(config)
    model = walk_model(config)
    plan = plan_window(model, None, config.n)
    margin = plan.horizon - config.n
    for i, (seed, field) in enumerate(iter_fields(config, plan, report, desc="backbone")):
        report.add("xi_density", float(field.slice(0).mean()), n=0, seed=seed)
        shallow = truncated_surrogate(field.env, config.n)
        report.add("surrogate_disagreement",
                   surrogate_disagreement(field.env, config.n, margin, at_time=0), n=config.n, seed=seed)
        report.add("xi_density_shallow", float(shallow.slice(0).mean()), n=config.n, seed=seed)
        if i == 0:
            report.add_table("slice_density", slice_density(field).reset_index())
    return report


def intersect_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    How often the clusters of two backbone sites M apart fail to meet by
    time C * M, for each separation M of ``n_list``.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    separations = sorted(set(max(1, v) for v in config.n_values))
    budgets = {M: int(math.ceil(Bounds.INTERSECTION_C * M)) for M in separations}
    plan = plan_window(model, None, max(budgets.values()), spread=separations[-1])
    origin = (0,) * config.d
    met = defaultdict(int)
    tried = defaultdict(int)
    for seed, field in iter_fields(config, plan, report, desc="intersect"):
        if not field.bit(origin, 0):
            continue
        for M in separations:
            other = (M,) + (0,) * (config.d - 1)
            if not field.bit(other, 0):
                continue
            tried[M] += 1
            hit = intersection_time(field, origin, other, 0, budgets[M])
            if hit is not None:
                met[M] += 1
                report.add("intersection_time", hit[1], n=M, seed=seed)
    frequencies = []
    for M in separations:
        missed = binomial_estimate(tried[M] - met[M], tried[M])
        report.add("non_intersection_frequency", missed.value, missed.stderr, n=M)
        frequencies.append(missed.value)
    observed = [f for f in frequencies if not math.isnan(f)]
    if len(observed) > 1:
        report.add_check("non_intersection_decreasing",
                         is_non_increasing(observed) and (observed[-1] < observed[0] or observed[0] == 0.0))
    return report


def survival_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Survival probabilities and the shallow-but-not-deep gap for each n."""
    report = DiagnosticReport(config)
    gaps = []
    for n in config.n_values:
        alive = survival_probability(config.p, config.d, n, config.seeds, config.seed_base)
        report.add("survival_probability", alive.value, alive.stderr, n=n)
        gap = survival_gap(config.p, config.d, n, config.seeds, config.seed_base, Bounds.SURVIVAL_DEEP_MARGIN)
        report.add("survival_gap", gap.value, gap.stderr, n=n)
        gaps.append(gap.value)
    if sum(g > 0 for g in gaps) > 1:
        fit = loglinear_fit(config.n_values, gaps)
        report.add("survival_gap_slope", fit.slope, fit.stderr)
        report.add_check("survival_gap_decays", fit.slope < 0)
    return report


def pc_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Bisection estimate of the survival threshold, cached per (d, n, seeds)."""
    report = DiagnosticReport(config)
    memory = joblib.Memory(location=cache_directory() / "pc", verbose=0)
    estimate = memory.cache(estimate_critical_p)
    p_c = estimate(config.d, config.n, config.seeds, config.seed_base, ratio=Bounds.CRITICAL_RATIO)
    report.add("p_c", p_c, n=config.n)
    report.add_check("p_supercritical", config.p > p_c)
    return report
