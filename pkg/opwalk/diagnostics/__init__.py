"""Diagnostics registered by experiment name."""

from typing import Callable, Dict

from opwalk.diagnostics.boxes import (
    couple_diagnostic,
    goodboxes_diagnostic,
    ladder_diagnostic,
    socialboxes_diagnostic,
)
from opwalk.diagnostics.fields import (
    backbone_diagnostic,
    gen_diagnostic,
    intersect_diagnostic,
    pc_diagnostic,
    survival_diagnostic,
)
from opwalk.diagnostics.laws import annealed_diagnostic, hits_diagnostic, propagate_diagnostic
from opwalk.diagnostics.limits import hybrid_diagnostic, lclt_diagnostic, qlclt_diagnostic
from opwalk.diagnostics.mixing import derivatives_diagnostic, pairtv_diagnostic
from opwalk.diagnostics.prefactors import invariance_diagnostic, prefactor_diagnostic
from opwalk.services.runner import DiagnosticReport
from opwalk.utils.config import ExperimentConfig

Diagnostic = Callable[[ExperimentConfig], DiagnosticReport]

EXPERIMENTS: Dict[str, Diagnostic] = {
    "gen": gen_diagnostic,
    "backbone": backbone_diagnostic,
    "propagate": propagate_diagnostic,
    "annealed": annealed_diagnostic,
    "prefactor": prefactor_diagnostic,
    "qlclt": qlclt_diagnostic,
    "lclt": lclt_diagnostic,
    "ladder": ladder_diagnostic,
    "goodboxes": goodboxes_diagnostic,
    "socialboxes": socialboxes_diagnostic,
    "couple": couple_diagnostic,
    "pairtv": pairtv_diagnostic,
    "intersect": intersect_diagnostic,
    "hits": hits_diagnostic,
    "hybrid": hybrid_diagnostic,
    "derivatives": derivatives_diagnostic,
    "invariance": invariance_diagnostic,
    "pc": pc_diagnostic,
    "survival": survival_diagnostic,
}

# statistic plotted by default for each experiment (x is n unless noted)
DEFAULT_PLOTS: Dict[str, str] = {
    "qlclt": "qlclt_error_median",
    "lclt": "lclt_error",
    "ladder": "lambda",
    "goodboxes": "good_fraction_mean",
    "socialboxes": "non_social_fraction_mean",
    "pairtv": "pair_tv_median",
    "hits": "hits_log_frequency",
    "hybrid": "L1_median",
    "intersect": "non_intersection_frequency",
    "survival": "survival_probability",
    "invariance": "invariance_gap",
}
