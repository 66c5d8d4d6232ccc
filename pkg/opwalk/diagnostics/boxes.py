"""Box-level diagnostics: ladder, goodboxes, socialboxes, couple."""

import math
from collections import defaultdict

import numpy as np

from opwalk.diagnostics.common import add_medians, annealed_laws, annealed_seed, iter_fields, walk_model
from opwalk.services.experiments import (
    BoxPartition,
    annealed_box_transition,
    build_coupling,
    classify_good,
    classify_social,
    ladder_scales,
    non_social_mass,
    scale_ladder,
)
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import plan_window
from opwalk.utils.config import ExperimentConfig
from opwalk.utils.defaults import Bounds, Tolerance
from opwalk.utils.stats import is_non_increasing, is_strictly_decreasing

LADDER_QUORUM = 0.9


def ladder_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    lambda_k ladder per seed, one table ``ladder-<seed>`` each.

    The summary row ``ladder_exceedance_fraction`` is the share of seeds
    with some lambda_k > lambda_{k-1} + C n_k^-alpha.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    _, _, checkpoints = ladder_scales(config.N, config.theta, config.M)
    annealed = annealed_laws(config, checkpoints)
    plan = plan_window(model, None, config.N)
    exceeded = 0
    for seed, field in iter_fields(config, plan, report, desc="ladder"):
        ladder = scale_ladder(field, config.N, config.theta, config.M, annealed)
        report.add_table(f"ladder-{seed}", ladder.to_frame(),
                         {"N": config.N, "theta": config.theta, "M": config.M, "seed": seed})
        for k, (n_k, value) in enumerate(zip(ladder.scales, ladder.lambdas)):
            report.add("lambda", value, n=n_k, seed=seed, group=f"k={k}")
        if not ladder.increments_hold(config.ladder_constant, config.alpha):
            exceeded += 1
    fraction = exceeded / config.seeds
    report.add("ladder_exceedance_fraction", fraction, n=config.N)
    report.add_check("ladder_increments", 1.0 - fraction >= LADDER_QUORUM)
    return report


def goodboxes_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    Fraction of good boxes at each scale n_k of ``n_list``.

    Boxes have the side floor((n_k^2)^theta) of the next coarser ladder
    level; in d = 1 every box within one side of the origin is classified,
    in higher dimensions only the box of the origin.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    scales = sorted(set(config.n_values))
    annealed = annealed_laws(config, scales)
    sides = {n_k: BoxPartition.of((n_k ** 2) ** config.theta, config.d).side for n_k in scales}
    reach = max(sides.values()) * 2
    plan = plan_window(model, None, scales[-1], spread=reach)
    C = config.C if config.C is not None else Bounds.GOOD_ESCAPE_C
    fractions = defaultdict(list)
    for seed, field in iter_fields(config, plan, report, desc="goodboxes"):
        for n_k in scales:
            partition = BoxPartition.of(sides[n_k], config.d)
            radius = partition.side if config.d == 1 else 0
            box_map = classify_good(field, partition, n_k, config.theta, config.eps, annealed[n_k],
                                    radius=radius, C=C, c=config.c)
            fractions[n_k].append(box_map.fraction(True))
            report.add("good_fraction", box_map.fraction(True), n=n_k, seed=seed)
            report.add("bad_sites", float(box_map.boxes["bad_sites"].sum()), n=n_k, seed=seed)
    means = []
    for n_k in scales:
        means.append(float(np.nanmean(fractions[n_k])))
        report.add("good_fraction_mean", means[-1], n=n_k)
    if len(scales) > 1:
        report.add_check("good_fraction_non_decreasing", is_non_increasing(means[::-1]))
    return report


def socialboxes_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """
    Non-social box fraction at time n for each box side M of ``n_list``,
    and the annealed mass the walk from (0, 0) puts on non-social boxes.
    """
    report = DiagnosticReport(config)
    model = walk_model(config)
    sides = sorted(set(max(1, v) for v in config.n_values))
    C = config.C if config.C is not None else Bounds.SOCIAL_C
    steps = int(math.ceil(C * sides[-1]))
    plan = plan_window(model, None, config.n + steps, spread=2 * sides[-1])
    law = annealed_laws(config, [config.n])[config.n]
    fractions = defaultdict(list)
    for seed, field in iter_fields(config, plan, report, desc="socialboxes"):
        for M in sides:
            social = classify_social(field, M, C, N=config.n, radius=M)
            fractions[M].append(social.fraction(False))
            report.add("non_social_fraction", social.fraction(False), n=M, seed=seed)
            report.add("non_social_mass", non_social_mass(social, law), n=M, seed=seed)
    means = []
    for M in sides:
        means.append(float(np.mean(fractions[M])))
        report.add("non_social_fraction_mean", means[-1], n=M)
    if config.p == 1.0 or sides == [1]:
        report.add_check("all_social", all(m == 0.0 for m in means))
    elif len(sides) > 1:
        report.add_check("non_social_decreasing", is_strictly_decreasing(means))
    return report


def couple_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Two-stage coupling of the quenched and annealed walks up to N, box stage of side M."""
    report = DiagnosticReport(config)
    model = walk_model(config)
    transition = annealed_box_transition(model, config.N, config.M, config.reps,
                                         annealed_seed(config), config.threads)
    plan = plan_window(model, None, config.N)
    residual = 0.0
    thetas = defaultdict(list)
    for seed, field in iter_fields(config, plan, report, desc="couple"):
        summary, _ = build_coupling(field, transition)
        for name, value in summary.as_dict().items():
            report.add(name, value, n=config.N, seed=seed)
        thetas[config.N].append(summary.theta)
        residual = max(residual, summary.quenched_residual, summary.annealed_residual)
    add_medians(report, "theta", thetas)
    theta_min = min(thetas[config.N])
    report.add("theta_min", theta_min, n=config.N)
    report.add_check("marginals_exact", residual < Tolerance.PREFACTOR)
    report.add_check("theta_positive", theta_min > 0)
    return report
