"""
Backbone of the oriented percolation cluster and cluster geometry.

The backbone indicator xi_t(x) marks sites connected by an open directed
path to time +infinity. On a finite window it is replaced by the truncated
field xi^(T): connection to the horizon slice T, computed by a backward
pass ``xi_T = omega_T``, ``xi_t = omega_t & dilate(xi_{t+1})``.
"""

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from opwalk.services import lattice
from opwalk.services.environment import (
    EnvironmentWindow,
    derive_seed,
    sample_batch,
)
from opwalk.utils.defaults import Bounds
from opwalk.utils.errors import ConfigurationError, RangeError
from opwalk.utils.io import BACKBONE_MAGIC, FieldHeader, read_field_dump, write_field_dump
from opwalk.utils.logging import get_logger
from opwalk.utils.stats import Estimate, binomial_estimate

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class BackboneField:
    """Truncated backbone xi^(T) over slices ``env.time_range[0] .. horizon``."""

    env: EnvironmentWindow
    horizon: int
    packed: np.ndarray = field(repr=False)
    truncated: bool = True

    @property
    def d(self) -> int:
        return self.env.d

    @property
    def periodic(self) -> bool:
        return self.env.periodic

    @property
    def t_lo(self) -> int:
        return self.env.time_range[0]

    def slice(self, t: int) -> np.ndarray:
        """xi^(T)_t as a boolean spatial grid."""
        if not self.t_lo <= t <= self.horizon:
            raise RangeError(f"time {t} outside backbone range [{self.t_lo}, {self.horizon}]")
        row = self.packed[t - self.t_lo]
        return np.unpackbits(row, count=self.env.n_sites, bitorder="little").astype(bool).reshape(self.env.shape)

    @cached_property
    def bits(self) -> np.ndarray:
        """All slices, shape (horizon - t_lo + 1, *shape)."""
        count = self.env.n_sites
        flat = np.unpackbits(self.packed, axis=1, count=count, bitorder="little").astype(bool)
        return flat.reshape((flat.shape[0],) + self.env.shape)

    def bit(self, x: Sequence[int], t: int) -> int:
        return int(self.slice(t)[self.env.site_index(x)])


def backward_pass(occupancy: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """
    Backbone bits of stacked occupancy arrays.

    ``occupancy`` has shape (..., time, *spatial); the horizon is the last
    slice. Leading axes are independent environments.
    """
    xi = np.empty(occupancy.shape, dtype=bool)
    spatial = (slice(None),) * d

    def at(t):
        return (Ellipsis, t) + spatial

    xi[at(-1)] = occupancy[at(-1)]
    for t in range(occupancy.shape[-d - 1] - 2, -1, -1):
        xi[at(t)] = occupancy[at(t)] & lattice.neighbourhood_any(xi[at(t + 1)], d, periodic)
    return xi


def compute_backbone(env: EnvironmentWindow, horizon: int) -> BackboneField:
    """
    xi^(T) for every window site with t <= T.

    One packed slice is kept per time; the pass holds only the slice above
    unpacked.
    """
    if not env.contains_time(horizon):
        raise RangeError(f"horizon {horizon} outside window times {env.time_range}")
    t_lo = env.time_range[0]
    n_rows = horizon - t_lo + 1
    packed = np.empty((n_rows, env.packed.shape[1]), dtype=np.uint8)
    above = env.slice_bits(horizon)
    packed[-1] = np.packbits(above.ravel(), bitorder="little")
    for t in range(horizon - 1, t_lo - 1, -1):
        above = env.slice_bits(t) & lattice.neighbourhood_any(above, env.d, env.periodic)
        packed[t - t_lo] = np.packbits(above.ravel(), bitorder="little")
    logger.debug("computed backbone", extra={"horizon": horizon, "seed": env.seed})
    return BackboneField(env=env, horizon=horizon, packed=packed)


def truncated_surrogate(env: EnvironmentWindow, cutoff_time: int) -> BackboneField:
    """
    Finite-range surrogate: connection to slice ``cutoff_time`` only.

    Equal to :func:`compute_backbone` with horizon ``cutoff_time``; bits at
    time t depend on omega in ``[t, cutoff_time]`` alone.
    """
    return compute_backbone(env, cutoff_time)


def surrogate_disagreement(env: EnvironmentWindow, cutoff_time: int, extra: int,
                           at_time: Optional[int] = None) -> float:
    """Fraction of sites at ``at_time`` where horizons s and s + extra disagree."""
    at_time = env.time_range[0] if at_time is None else at_time
    near = compute_backbone(env, cutoff_time).slice(at_time)
    far = compute_backbone(env, cutoff_time + extra).slice(at_time)
    return float(np.mean(near != far))


def slice_density(field: BackboneField) -> pd.Series:
    """Mean xi bit per slice, indexed by time."""
    densities = field.bits.reshape(field.bits.shape[0], -1).mean(axis=1)
    return pd.Series(densities, index=pd.RangeIndex(field.t_lo, field.horizon + 1, name="t"), name="density")


# ======================================================================
# FORWARD REACHABILITY
# ======================================================================

def reachable_set(env: EnvironmentWindow, start: Tuple[Sequence[int], int], n: int) -> np.ndarray:
    """Sites y with an open path from (x, m) to (y, n), as a boolean grid."""
    x, m = start
    if n < m:
        raise RangeError(f"target time {n} precedes start time {m}")
    env.time_index(n)
    reach = np.zeros(env.shape, dtype=bool)
    reach[env.site_index(x)] = True
    reach &= env.slice_bits(m)
    for t in range(m + 1, n + 1):
        if not reach.any():
            break
        reach = lattice.neighbourhood_any(reach, env.d, env.periodic) & env.slice_bits(t)
    return reach


def reaches(env: EnvironmentWindow, source: Tuple[Sequence[int], int],
            target: Tuple[Sequence[int], int]) -> bool:
    """True iff an open path joins ``source`` to ``target`` (endpoints included)."""
    y, n = target
    reach = reachable_set(env, source, n)
    return bool(reach[env.site_index(y)])


def intersection_time(field: BackboneField, x: Sequence[int], y: Sequence[int],
                      start_time: int, max_T: int) -> Optional[Tuple[Tuple[int, ...], int]]:
    """
    First time the clusters of (x, start) and (y, start) meet on the backbone.

    Returns (z, t) with t minimal and z the lexicographically smallest
    witness, or None when they have not met by ``max_T``.
    """
    env = field.env
    for point in (x, y):
        if not field.bit(point, start_time):
            raise ConfigurationError(f"({tuple(point)}, {start_time}) is not on the backbone")
    last = min(max_T, field.horizon)
    reach_x = np.zeros(env.shape, dtype=bool)
    reach_y = np.zeros(env.shape, dtype=bool)
    reach_x[env.site_index(x)] = True
    reach_y[env.site_index(y)] = True
    for t in range(start_time, last + 1):
        if t > start_time:
            occ = env.slice_bits(t)
            reach_x = lattice.neighbourhood_any(reach_x, env.d, env.periodic) & occ
            reach_y = lattice.neighbourhood_any(reach_y, env.d, env.periodic) & occ
        meet = reach_x & reach_y & field.slice(t)
        if meet.any():
            index = np.argwhere(meet)[0]
            z = tuple(int(i) + lo for i, lo in zip(index, env.lower))
            return z, t
    return None


# ======================================================================
# SURVIVAL
# ======================================================================

def survival_times(p: float, d: int, horizon: int, seeds: Sequence[int]) -> np.ndarray:
    """
    Last time t <= horizon reached from the origin at time 0, per seed.

    -1 when the origin is closed. Slices are sampled one at a time for all
    seeds together.
    """
    extent = horizon + 1
    shape = (len(seeds),) + (2 * extent + 1,) * d
    reach = np.zeros(shape, dtype=bool)
    reach[(slice(None),) + (extent,) * d] = True
    last = np.full(len(seeds), -1, dtype=np.int64)
    for t in range(0, horizon + 1):
        occ = sample_batch(d, extent, (t, t), p, seeds)[:, 0]
        if t > 0:
            reach = lattice.neighbourhood_any(reach, d, periodic=False)
        reach &= occ
        alive = reach.reshape(len(seeds), -1).any(axis=1)
        last[alive] = t
        if not alive.any():
            break
    return last


def _rep_seeds(seed: int, reps: int) -> list:
    return [derive_seed(seed, r) for r in range(reps)]


def survival_probability(p: float, d: int, n: int, reps: int, seed: int = 0) -> Estimate:
    """P((0, 0) is joined to slice n)."""
    last = survival_times(p, d, n, _rep_seeds(seed, reps))
    return binomial_estimate(int(np.sum(last >= n)), reps)


def survival_gap(p: float, d: int, n: int, reps: int, seed: int = 0,
                 deep_margin: int = Bounds.SURVIVAL_DEEP_MARGIN) -> Estimate:
    """
    Frequency of origins joined to slice n but not to slice n + deep_margin.

    Args:
        p, d: model parameters
        n: shallow horizon
        reps: number of independent fields
        seed: base seed
        deep_margin: distance from the shallow to the deep horizon
    """
    if reps < 1:
        raise ConfigurationError("reps must be at least 1")
    deep = n + deep_margin
    last = survival_times(p, d, deep, _rep_seeds(seed, reps))
    doomed = int(np.sum((last >= n) & (last < deep)))
    logger.debug("survival gap", extra={"p": p, "d": d, "n": n, "doomed": doomed, "reps": reps})
    return binomial_estimate(doomed, reps)


def estimate_critical_p(d: int, n: int, reps: int, seed: int = 0, tol: float = 5e-3,
                        ratio: float = Bounds.CRITICAL_RATIO) -> float:
    """
    Bisection for the survival threshold.

    p is declared supercritical when P(survive 2n) / P(survive n) >= ratio.
    Every p is evaluated on the same seeds, so the bits are monotone in p.
    """
    seeds = _rep_seeds(seed, reps)
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        last = survival_times(mid, d, 2 * n, seeds)
        short = np.sum(last >= n)
        persistence = np.sum(last >= 2 * n) / short if short else 0.0
        if persistence >= ratio:
            hi = mid
        else:
            lo = mid
        logger.debug("critical p bisection", extra={"p": mid, "persistence": float(persistence)})
    return 0.5 * (lo + hi)


# ======================================================================
# PERSISTENCE
# ======================================================================

def dump_backbone(field: BackboneField, path: Path) -> Path:
    env = field.env
    header = FieldHeader(d=env.d, spatial_extents=env.spatial_extents, time_range=env.time_range,
                         p=env.p, seed=env.seed, periodic=env.periodic, center=env.center,
                         horizon=field.horizon)
    return write_field_dump(path, BACKBONE_MAGIC, header, field.bits)


def load_backbone(path: Path, env: EnvironmentWindow) -> BackboneField:
    """Read a backbone dump taken on ``env``."""
    magic, header, bits = read_field_dump(path)
    if magic != BACKBONE_MAGIC:
        raise ConfigurationError(f"{path} is not a backbone dump")
    if header.spatial_extents != env.spatial_extents or header.time_range != env.time_range \
            or header.seed != (env.seed & 0xFFFFFFFFFFFFFFFF):
        raise ConfigurationError(f"{path} was taken on a different window")
    flat = bits.reshape(bits.shape[0], -1)
    return BackboneField(env=env, horizon=header.horizon,
                         packed=np.packbits(flat, axis=1, bitorder="little"))
