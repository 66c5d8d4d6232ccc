"""Shared plumbing for the diagnostics: models, seeds, fields and annealed references."""

from typing import Dict, Iterator, List, Sequence, Tuple

from tqdm import tqdm

from opwalk.services.cluster import BackboneField
from opwalk.services.environment import derive_seed
from opwalk.services.runner import DiagnosticReport
from opwalk.services.walk import AnnealedCache, DistributionSlice, WalkModel, WindowPlan, sample_field
from opwalk.utils.config import ExperimentConfig
from opwalk.utils.logging import get_logger
from opwalk.utils.stats import median_by

logger = get_logger(__name__)

# annealed references use derive_seed(seed_base, ANNEALED_STREAM) as their base seed,
# a stream disjoint from the per-field seeds r = 0 .. seeds-1
ANNEALED_STREAM = 2 ** 32


def walk_model(config: ExperimentConfig) -> WalkModel:
    return WalkModel(d=config.d, p=config.p, boundary_mode=config.boundary,
                     horizon_margin=config.horizon_margin, spatial_margin=config.spatial_margin)


def field_seeds(config: ExperimentConfig) -> List[int]:
    return [derive_seed(config.seed_base, r) for r in range(config.seeds)]


def annealed_seed(config: ExperimentConfig) -> int:
    return derive_seed(config.seed_base, ANNEALED_STREAM)


def iter_fields(config: ExperimentConfig, plan: WindowPlan, report: DiagnosticReport,
                desc: str = "fields") -> Iterator[Tuple[int, BackboneField]]:
    """(seed, field) for every seed of the run; each window is fingerprinted."""
    model = walk_model(config)
    for seed in tqdm(field_seeds(config), desc=desc, leave=False):
        field = sample_field(model, seed, plan)
        report.fingerprint(field.env)
        yield seed, field


def annealed_laws(config: ExperimentConfig, times: Sequence[int]) -> Dict[int, DistributionSlice]:
    """Cached Monte Carlo annealed laws from (0, 0) at ``times``, sampled on shared fields."""
    cache = AnnealedCache()
    return cache.series(walk_model(config), times, config.reps, annealed_seed(config), config.threads)


def add_medians(report: DiagnosticReport, statistic: str, per_seed: Dict[int, List[float]]) -> List[float]:
    """One ``<statistic>_median`` row per n; returns the medians in n order."""
    medians = []
    for n in sorted(per_seed):
        value = float(median_by(per_seed[n])) if per_seed[n] else float("nan")
        report.add(f"{statistic}_median", value, n=n)
        medians.append(value)
    return medians
