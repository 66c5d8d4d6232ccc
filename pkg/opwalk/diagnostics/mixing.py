"""Mixing diagnostics: pairtv, derivatives."""

import math
from collections import defaultdict
from typing import Optional, Tuple

from opwalk.diagnostics.common import add_medians, annealed_seed, iter_fields, walk_model
from opwalk.services.cluster import BackboneField
from opwalk.services.experiments import DERIVATIVE_TYPES, derivative_estimates, pair_tv
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import plan_window
from opwalk.utils.config import ExperimentConfig
from opwalk.utils.logging import get_logger
from opwalk.utils.stats import is_strictly_decreasing

logger = get_logger(__name__)

PAIR_TV_CEILING = 0.3
DERIVATIVE_SPREAD = 3.0    # largest max/min ratio of a scaled difference across n


def adjacent_backbone_pair(field: BackboneField, radius: int) -> Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """Closest x to the origin on the first axis with x and x + e1 both on the backbone at time 0."""
    zeros = (0,) * (field.d - 1)
    for step in range(radius + 1):
        for c in sorted({step, -step}):
            x, y = (c,) + zeros, (c + 1,) + zeros
            if field.bit(x, 0) and field.bit(y, 0):
                return x, y
    return None


def pairtv_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """TV distance between the quenched laws from two adjacent backbone sites, per n."""
    report = DiagnosticReport(config)
    model = walk_model(config)
    times = sorted(set(config.n_values))
    radius = config.spatial_margin // 2
    plan = plan_window(model, None, times[-1], spread=radius + 1)
    values = defaultdict(list)
    for seed, field in iter_fields(config, plan, report, desc="pairtv"):
        pair = adjacent_backbone_pair(field, radius)
        if pair is None:
            logger.info("no adjacent backbone pair", extra={"seed": seed})
            continue
        for n in times:
            tv = pair_tv(field, pair[0], pair[1], n)
            values[n].append(tv)
            report.add("pair_tv", tv, n=n, seed=seed)
    medians = add_medians(report, "pair_tv", values)
    if len(times) > 1:
        report.add_check("pair_tv_decreasing", is_strictly_decreasing(medians))
    report.add_check("pair_tv_small", bool(medians) and medians[-1] < PAIR_TV_CEILING)
    return report


def derivatives_diagnostic(config: ExperimentConfig) -> DiagnosticReport:
    """Scaled annealed finite differences in start, time and target; rows ``derivative_<type>``."""
    report = DiagnosticReport(config)
    table = derivative_estimates(walk_model(config), config.n_values, config.reps, annealed_seed(config),
                                 eps=config.eps, threads=config.threads)
    for row in table.itertuples(index=False):
        report.add(f"derivative_{row.statistic}", row.value, row.stderr, n=int(row.n))
    report.add_table("derivatives", table)
    report.add_check("derivatives_finite", all(math.isfinite(v) for v in table["value"]))
    if table["n"].nunique() > 1:
        typed = table[table["statistic"].isin(DERIVATIVE_TYPES)]
        spread = typed.groupby("statistic")["value"].agg(lambda v: v.max() / v.min() if v.min() > 0 else math.inf)
        report.add_check("derivatives_bounded", bool((spread < DERIVATIVE_SPREAD).all()))
    return report
