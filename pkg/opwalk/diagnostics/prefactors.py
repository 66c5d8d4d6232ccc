"""Prefactor diagnostics: prefactor, invariance."""

from collections import defaultdict
from typing import List

import numpy as np

from opwalk.diagnostics.common import annealed_laws, iter_fields, walk_model
from opwalk.services.prefactor import (
    CesaroSpec,
    box_concentration,
    cesaro_prefactor,
    check_harmonicity,
    compute_prefactor,
    invariance_gap,
    patch_functional,
    pov_weights,
    prefactor_moments,
    uniqueness_probe,
)
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import embed, plan_window, step_distribution
from opwalk.utils.config import ExperimentConfig
from opwalk.utils.defaults import Tolerance
from opwalk.utils.stats import is_non_increasing, median_by

FUNCTIONALS = ("one", "xi_bit", "patch_density")


def prefactor_depths(config: ExperimentConfig) -> List[int]:
    return sorted({max(1, config.N_max // 4), max(1, config.N_max // 2), config.N_max})


def _cesaro_stabilization(field, n: int, N_max: int) -> float:
    """sup |Cesaro(N_max) - Cesaro(2 N_max)| on the central half of the common box."""
    coarse = cesaro_prefactor(field, n, N_max)
    fine = cesaro_prefactor(field, n, 2 * N_max)
    values = embed(coarse.values, coarse.lower, fine.lower, fine.shape, strict=False)
    core = tuple(slice(s // 4, s - s // 4) for s in fine.shape)
    return float(np.max(np.abs(values[core] - fine.values[core])))


def _kernel_gap(field, n: int, radius: int = 2) -> float:
    """Largest gap between the point-of-view kernel and the walk kernel near the origin."""
    worst = 0.0
    for x in np.ndindex(*(2 * radius + 1,) * field.d):
        site = tuple(c - radius for c in x)
        gap = np.abs(pov_weights(field, (site, n)).probabilities
                     - step_distribution(field, (site, n)).probabilities)
        worst = max(worst, float(gap.max()))
    return worst


def prefactor_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    psi_N at time n for several depths: harmonicity, moments, box concentration.

    Also reports how much the Cesaro average moves when its depth doubles
    and the annealed-weighted gap between the two constructions.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    n, N_max = config.n, config.N_max
    depths = prefactor_depths(config)
    plan = plan_window(model, None, n, lookback=2 * N_max, spread=2 * N_max)
    annealed = annealed_laws(config, [n])[n]
    moments_by_k = defaultdict(lambda: {N: [] for N in depths})
    worst_residual = worst_mean_gap = worst_kernel_gap = 0.0
    for seed, field in iter_fields(config, plan, report, desc="prefactor"):
        for N in depths:
            psi = compute_prefactor(field, n, N)
            report.add("psi_min", float(psi.values.min()), n=N, seed=seed)
            report.add("psi_mean", psi.mean(), n=N, seed=seed)
            if field.periodic:
                worst_mean_gap = max(worst_mean_gap, abs(psi.mean() - 1.0))
            residual = check_harmonicity(field, n, N)
            worst_residual = max(worst_residual, residual)
            report.add("harmonicity_residual", residual, n=N, seed=seed)
            moments = prefactor_moments(psi)
            for k, moment in moments.items():
                report.add("psi_moment", moment, n=N, seed=seed, group=f"k={k}")
                moments_by_k[k][N].append(float(moment))
            concentration = box_concentration(psi, config.M)
            report.add("box_exceedance", concentration.exceedance, n=N, seed=seed)
        report.add("cesaro_stabilization", _cesaro_stabilization(field, n, N_max), n=N_max, seed=seed)
        gap = uniqueness_probe(field, CesaroSpec(N_max), CesaroSpec(2 * N_max), n, annealed)
        report.add("uniqueness_gap", gap, n=N_max, seed=seed)
        worst_kernel_gap = max(worst_kernel_gap, _kernel_gap(field, n))
    report.add("pov_kernel_gap", worst_kernel_gap, n=n)
    report.add_check("pov_matches_walk_kernel", worst_kernel_gap <= Tolerance.EXACT)
    report.add_check("harmonic", worst_residual < Tolerance.PREFACTOR)
    stable = True
    for k, per_depth in sorted(moments_by_k.items()):
        medians = [float(median_by(per_depth[N])) for N in depths]
        for N, value in zip(depths, medians):
            report.add("psi_moment_median", value, n=N, group=f"k={k}")
        stable = stable and is_non_increasing(medians, rel_tol=0.2)
    report.add_check("moments_stable", stable)
    if config.boundary == "periodic":
        report.add_check("periodic_mean_one", worst_mean_gap < Tolerance.EXACT)
    return report


def invariance_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """|E[psi_N (N f - f)]| for the standard xi-patch functionals and several depths."""
    report = DiagnosticReport(config)
    model = walk_model(config)
    n = config.n
    depths = prefactor_depths(config)
    plan = plan_window(model, None, n + 1, lookback=max(depths), spread=max(depths))
    fields = [field for _, field in iter_fields(config, plan, report, desc="invariance")]
    for name in FUNCTIONALS:
        functional = patch_functional(name, config.patch_radius)
        for N in depths:
            gap = invariance_gap(fields, functional, n, N)
            report.add("invariance_gap", gap.value, gap.stderr, n=N, group=functional.name)
            if name == "one":
                report.add_check(f"invariance_one_N{N}", gap.value < Tolerance.EXACT)
    return report
