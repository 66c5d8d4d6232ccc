"""
The directed walk on the backbone.

From (x, n) the walk moves to a uniformly chosen backbone site of the
neighbourhood U(x, n) = {(z, n+1): |z - x|_inf <= 1} when xi_n(x) = 1, and
to a uniform site of U(x, n) otherwise. Laws are propagated slice by slice
as dense arrays on the window grid:

    new = xi_{n+1} * nbsum(mass * xi_n / count) + nbsum(mass * (1 - xi_n) / 3^d)

where ``count`` is the number of backbone sites around each site at n+1.
Every array may carry leading batch axes (several starts, several
environments) which are propagated independently.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd
from tqdm import tqdm

from opwalk.services import lattice
from opwalk.services.cluster import BackboneField, backward_pass, compute_backbone
from opwalk.services.environment import (
    EnvironmentWindow,
    SpaceTimePoint,
    derive_seed,
    sample_batch,
    sample_environment,
)
from opwalk.utils.config import cache_directory
from opwalk.utils.defaults import Tolerance, Window
from opwalk.utils.errors import CapacityError, GeometryError, MassDriftError, RangeError
from opwalk.utils.logging import get_logger
from opwalk.utils.stats import Estimate, mean_estimate

logger = get_logger(__name__)

Start = Tuple[Sequence[int], int]


# ======================================================================
# DOMAIN TYPES
# ======================================================================

@dataclass(frozen=True)
class KernelRow:
    """Transition probabilities out of one space-time site."""

    origin: SpaceTimePoint
    offsets: Tuple[Tuple[int, ...], ...]
    probabilities: np.ndarray

    def as_dict(self) -> Dict[Tuple[int, ...], float]:
        return {o: float(q) for o, q in zip(self.offsets, self.probabilities)}


@dataclass(frozen=True, eq=False)
class DistributionSlice:
    """
    A probability mass function on one time slice.

    Mass is stored densely on a box of the lattice whose first site is
    ``lower``; sites outside the box carry no mass.
    """

    n: int
    lower: Tuple[int, ...]
    mass: np.ndarray
    label: str = "quenched"
    provenance: Dict[str, Any] = field(default_factory=dict)
    stderr: Optional[np.ndarray] = None

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mass.shape

    def total(self) -> float:
        return float(self.mass.sum())

    def axis_coords(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.arange(lo, lo + size) for lo, size in zip(self.lower, self.shape))

    def value(self, x: Sequence[int]) -> float:
        index = tuple(int(c) - lo for c, lo in zip(x, self.lower))
        if any(not 0 <= i < s for i, s in zip(index, self.shape)):
            return 0.0
        return float(self.mass[index])

    def reindexed(self, lower: Sequence[int], shape: Sequence[int]) -> "DistributionSlice":
        """Same law on another box; mass outside the new box is a geometry error."""
        return replace(self, lower=tuple(lower), mass=embed(self.mass, self.lower, lower, shape),
                       stderr=None if self.stderr is None else embed(self.stderr, self.lower, lower, shape, strict=False))

    def shifted(self, y: Sequence[int], m: int = 0) -> "DistributionSlice":
        """Translate the law by (y, m)."""
        return replace(self, n=self.n + m, lower=tuple(lo + c for lo, c in zip(self.lower, y)))

    def to_frame(self) -> pd.DataFrame:
        """Sites with positive mass, in grid order: x1..xd, mass[, stderr]."""
        nonzero = np.nonzero(self.mass)
        frame = pd.DataFrame({f"x{i + 1}": nonzero[i] + self.lower[i] for i in range(self.d)})
        frame["mass"] = self.mass[nonzero]
        if self.stderr is not None:
            frame["stderr"] = self.stderr[nonzero]
        return frame

    def metadata(self) -> Dict[str, Any]:
        return {"label": self.label, "n": self.n, "lower": list(self.lower), **self.provenance}


@dataclass(frozen=True)
class WalkModel:
    """Model parameters shared by every annealed computation."""

    d: int
    p: float
    boundary_mode: Literal["open", "periodic"] = "open"
    horizon_margin: Optional[int] = None
    spatial_margin: int = Window.SPATIAL_MARGIN

    @property
    def periodic(self) -> bool:
        return self.boundary_mode == "periodic"


@dataclass(frozen=True)
class WindowPlan:
    spatial_extents: Tuple[int, ...]
    time_range: Tuple[int, int]
    center: Tuple[int, ...]

    @property
    def horizon(self) -> int:
        return self.time_range[1]

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(2 * e + 1 for e in self.spatial_extents)

    @property
    def lower(self) -> Tuple[int, ...]:
        return tuple(c - e for c, e in zip(self.center, self.spatial_extents))

    def volume(self) -> int:
        return int(np.prod(self.shape)) * (self.time_range[1] - self.time_range[0] + 1)


# ======================================================================
# HELPERS
# ======================================================================

def as_start(start, d: int) -> Tuple[Tuple[int, ...], int]:
    if isinstance(start, SpaceTimePoint):
        return start.x, start.n
    x, m = start
    x = (int(x),) * d if np.isscalar(x) else tuple(int(c) for c in x)
    return x, int(m)


def embed(values: np.ndarray, lower: Sequence[int], new_lower: Sequence[int],
          new_shape: Sequence[int], strict: bool = True) -> np.ndarray:
    """Copy a grid onto another box; with ``strict`` dropped mass raises GeometryError."""
    out = np.zeros(tuple(new_shape), dtype=values.dtype)
    src, dst = [], []
    for lo, size, new_lo, new_size in zip(lower, values.shape, new_lower, new_shape):
        start = max(lo, new_lo)
        stop = min(lo + size, new_lo + new_size)
        if stop <= start:
            src = None
            break
        src.append(slice(start - lo, stop - lo))
        dst.append(slice(start - new_lo, stop - new_lo))
    if src is not None:
        out[tuple(dst)] = values[tuple(src)]
    if strict and not np.isclose(out.sum(), values.sum(), rtol=0.0, atol=Tolerance.EXACT):
        raise GeometryError(f"law does not fit in box lower={tuple(new_lower)} shape={tuple(new_shape)}")
    return out


def align(*slices: DistributionSlice) -> Tuple[Tuple[int, ...], List[np.ndarray]]:
    """Arrays of several slices on their common bounding box."""
    d = slices[0].d
    lower = tuple(min(s.lower[i] for s in slices) for i in range(d))
    upper = tuple(max(s.lower[i] + s.shape[i] for s in slices) for i in range(d))
    shape = tuple(u - lo for u, lo in zip(upper, lower))
    return lower, [embed(s.mass, s.lower, lower, shape) for s in slices]


def check_mass(total: float, context: str, expected: float = 1.0) -> None:
    """Mass drift beyond Tolerance.DRIFT is a defect; beyond EXACT it is logged."""
    drift = abs(total - expected)
    if drift > Tolerance.DRIFT:
        raise MassDriftError(f"{context}: total mass {total!r} drifted by {drift:.3e}")
    if drift > Tolerance.EXACT:
        logger.warning("mass drift", extra={"context": context, "drift": drift})


def _ensure_interior(mass: np.ndarray, d: int, periodic: bool, context: str) -> None:
    if periodic:
        return
    edge = lattice.boundary_mask(mass.shape[-d:])
    if np.any(mass[..., edge] != 0):
        raise GeometryError(f"{context}: walk mass reached the window edge")


def push(mass: np.ndarray, on: np.ndarray, xi_next: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """One step of the quenched kernel applied to (batched) mass arrays."""
    count = lattice.neighbourhood_count(xi_next, d, periodic)
    share = np.divide(mass, count, out=np.zeros(np.broadcast(mass, count).shape), where=on & (count > 0))
    free = np.where(on, 0.0, mass) / 3 ** d
    return xi_next * lattice.neighbourhood_sum(share, d, periodic) + lattice.neighbourhood_sum(free, d, periodic)


def support_push(support: np.ndarray, on: np.ndarray, xi_next: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """Positivity pattern of :func:`push`."""
    to_backbone = lattice.neighbourhood_any(support & on, d, periodic) & xi_next
    return to_backbone | lattice.neighbourhood_any(support & ~on, d, periodic)


def _check_times(field: BackboneField, m: int, n_steps: int) -> None:
    if n_steps < 0:
        raise RangeError(f"negative number of steps {n_steps}")
    if m < field.t_lo:
        raise RangeError(f"start time {m} precedes the window start {field.t_lo}")
    if m + n_steps > field.horizon:
        raise GeometryError(f"walk to time {m + n_steps} passes the backbone horizon {field.horizon}",
                            hint="raise horizon_margin")


def _point_masses(field: BackboneField, starts: Sequence[Sequence[int]]) -> np.ndarray:
    env = field.env
    mass = np.zeros((len(starts),) + env.shape)
    for i, x in enumerate(starts):
        mass[(i,) + env.site_index(x)] = 1.0
    return mass


def iterate_push(field: BackboneField, mass: np.ndarray, t0: int, k: int,
                 leak: bool = False, keep: Optional[np.ndarray] = None) -> Iterator[Tuple[int, np.ndarray]]:
    """
    Yield (t, mass at t) for t = t0+1 .. t0+k.

    Args:
        leak: allow mass to leave an open window (prefactor fields)
        keep: optional mask multiplied in after every step (killed walks)
    """
    _check_times(field, t0, k)
    bits = field.bits
    for t in range(t0, t0 + k):
        if not leak:
            _ensure_interior(mass, field.d, field.periodic, f"step {t}->{t + 1}")
        mass = push(mass, bits[t - field.t_lo], bits[t + 1 - field.t_lo], field.d, field.periodic)
        if keep is not None:
            mass = mass * keep
        yield t + 1, mass


# ======================================================================
# QUENCHED LAW
# ======================================================================

def step_distribution(field: BackboneField, origin: Start) -> KernelRow:
    """Kernel row out of (x, n), read site by site from the backbone."""
    x, n = as_start(origin, field.d)
    if not field.t_lo <= n < field.horizon:
        raise RangeError(f"kernel at time {n} needs slice {n + 1} <= horizon {field.horizon}")
    env = field.env
    offsets = tuple(lattice.offsets(field.d))
    above = field.slice(n + 1)
    successors = np.array([
        above[env.site_index(z)] if env.contains_site(z) else False
        for z in (tuple(c + o for c, o in zip(x, off)) for off in offsets)
    ], dtype=np.float64)
    if field.bit(x, n):
        probabilities = successors / successors.sum()
    else:
        probabilities = np.full(len(offsets), 3.0 ** -field.d)
    return KernelRow(origin=SpaceTimePoint(x, n), offsets=offsets, probabilities=probabilities)


def kernel_rows(field: BackboneField, n: int) -> np.ndarray:
    """All kernel rows of slice n, shape (*shape, 3^d), columns in offset order."""
    if not field.t_lo <= n < field.horizon:
        raise RangeError(f"kernel at time {n} needs slice {n + 1} <= horizon {field.horizon}")
    on = field.bits[n - field.t_lo]
    above = field.bits[n + 1 - field.t_lo]
    count = lattice.neighbourhood_count(above, field.d, field.periodic)
    inverse = np.divide(1.0, count, out=np.zeros(count.shape), where=count > 0)
    offs = lattice.offsets(field.d)
    rows = np.empty(field.env.shape + (len(offs),))
    for j, off in enumerate(offs):
        rows[..., j] = np.where(on, lattice.shifted(above, off, field.d, field.periodic) * inverse,
                                3.0 ** -field.d)
    return rows


def propagate_mass(field: BackboneField, mass: np.ndarray, t0: int, k: int, leak: bool = False) -> np.ndarray:
    """Push a non-negative (possibly batched) mass array from slice t0 forward k steps."""
    mass = np.asarray(mass, dtype=np.float64)
    for _, mass in iterate_push(field, mass, t0, k, leak=leak):
        pass
    return mass


def propagate_many(field: BackboneField, starts: Sequence[Sequence[int]], m: int, n_steps: int) -> np.ndarray:
    """Quenched laws at m + n_steps from several sites at time m, shape (len(starts), *shape)."""
    return propagate_mass(field, _point_masses(field, starts), m, n_steps)


def propagate_quenched(field: BackboneField, start: Start, n_steps: int) -> DistributionSlice:
    """
    Exact quenched law of X_{m+n_steps} started from (y, m).

    Raises:
        GeometryError: the walk's cone reaches the window edge or the horizon
        MassDriftError: the total mass drifted beyond tolerance
    """
    y, m = as_start(start, field.d)
    mass = propagate_many(field, [y], m, n_steps)[0]
    check_mass(float(mass.sum()), f"quenched law from {(y, m)}")
    return DistributionSlice(n=m + n_steps, lower=field.env.lower, mass=mass, label="quenched",
                             provenance={"seeds": [field.env.seed], "reps": "exact",
                                         "start": [list(y), m], "horizon": field.horizon})


def propagate_history(field: BackboneField, start: Start, n_steps: int) -> List[DistributionSlice]:
    """Quenched laws at every time m .. m + n_steps."""
    y, m = as_start(start, field.d)
    mass = _point_masses(field, [y])[0]
    base = {"seeds": [field.env.seed], "reps": "exact", "start": [list(y), m]}
    history = [DistributionSlice(n=m, lower=field.env.lower, mass=mass, provenance=base)]
    for t, mass in iterate_push(field, mass, m, n_steps):
        history.append(DistributionSlice(n=t, lower=field.env.lower, mass=mass, provenance=base))
    return history


def sample_paths(field: BackboneField, start: Start, n_steps: int, count: int,
                 rng: np.random.Generator) -> np.ndarray:
    """
    Independent quenched paths, shape (count, n_steps + 1, d).

    Walkers are advanced together: the kernel of each slice is built once
    and every walker draws its offset by inverting the row's cumulative sum.
    """
    y, m = as_start(start, field.d)
    _check_times(field, m, n_steps)
    env = field.env
    offs = np.array(lattice.offsets(field.d))
    shape = np.array(env.shape)
    position = np.tile(np.array(env.site_index(y)), (count, 1))
    paths = np.empty((count, n_steps + 1, field.d), dtype=np.int64)
    paths[:, 0] = position
    for step, t in enumerate(range(m, m + n_steps), start=1):
        rows = kernel_rows(field, t)[tuple(position.T)]
        cumulative = np.cumsum(rows, axis=1)
        cumulative[:, -1] = 1.0
        draws = rng.random(count)[:, None]
        choice = (draws >= cumulative).sum(axis=1)
        position = position + offs[choice]
        if field.periodic:
            position %= shape
        elif np.any(position < 0) or np.any(position >= shape):
            raise GeometryError(f"sampled path left the window at time {t + 1}")
        paths[:, step] = position
    return paths + np.array(env.lower)


def sample_path(field: BackboneField, start: Start, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """One quenched path as an (n_steps + 1, d) array of sites."""
    return sample_paths(field, start, n_steps, 1, rng)[0]


def escape_probabilities(field: BackboneField, starts: Sequence[Sequence[int]], m: int,
                         n_steps: int, radius: float) -> np.ndarray:
    """P_omega^(x,m)(max_{s<=n} |X_{m+s} - x|_inf > radius) for each start x."""
    if radius >= n_steps:
        return np.zeros(len(starts))
    env = field.env
    coords = np.meshgrid(*env.axis_coords(), indexing="ij")
    keep = np.stack([
        np.max([np.abs(c - xi) for c, xi in zip(coords, x)], axis=0) <= radius for x in starts
    ])
    mass = _point_masses(field, starts)
    for _, mass in iterate_push(field, mass, m, n_steps, keep=keep):
        pass
    return 1.0 - mass.reshape(len(starts), -1).sum(axis=1)


def escape_probability(field: BackboneField, start: Start, n_steps: int, radius: float) -> float:
    y, m = as_start(start, field.d)
    return float(escape_probabilities(field, [y], m, n_steps, radius)[0])


def support_cones(field: BackboneField, starts: Sequence[Sequence[int]], m: int, n_steps: int) -> np.ndarray:
    """Sites of positive quenched probability at m + n_steps, one boolean grid per start."""
    _check_times(field, m, n_steps)
    support = _point_masses(field, starts) > 0
    bits = field.bits
    for t in range(m, m + n_steps):
        _ensure_interior(support, field.d, field.periodic, f"support step {t}->{t + 1}")
        support = support_push(support, bits[t - field.t_lo], bits[t + 1 - field.t_lo], field.d, field.periodic)
    return support


def support_cone(field: BackboneField, start: Start, n_steps: int) -> np.ndarray:
    y, m = as_start(start, field.d)
    return support_cones(field, [y], m, n_steps)[0]


# ======================================================================
# WINDOW PLANNING
# ======================================================================

def plan_window(model: WalkModel, start: Optional[Start] = None, n_steps: int = 0,
                lookback: int = 0, spread: int = 0) -> WindowPlan:
    """
    Window for a walk of ``n_steps`` from ``start``.

    Spatially the slab covers y +/- (n + 1 + lookback + spread + spatial
    margin); in time it covers [m - lookback, m + n + horizon margin]. The
    default horizon margin is ``Window.horizon_margin`` of the slab volume.
    """
    y, m = as_start(start if start is not None else ((0,) * model.d, 0), model.d)
    reach = n_steps + 1 + lookback + spread + model.spatial_margin
    extents = (reach,) * model.d
    t_lo = m - lookback
    last = m + n_steps
    margin = model.horizon_margin
    if margin is None:
        volume = (2 * reach + 1) ** model.d * (last - t_lo + 1)
        margin = Window.horizon_margin(volume)
    return WindowPlan(spatial_extents=extents, time_range=(t_lo, last + margin), center=y)


def sample_field(model: WalkModel, seed: int, plan: WindowPlan) -> BackboneField:
    """Environment window and backbone for one seed of ``model``."""
    env = sample_environment(model.d, plan.spatial_extents, plan.time_range, model.p, seed,
                             boundary_mode=model.boundary_mode, center=plan.center)
    return compute_backbone(env, plan.horizon)


# ======================================================================
# ANNEALED LAW
# ======================================================================

@dataclass(frozen=True)
class _Probe:
    x: Tuple[int, ...]
    m: int
    target: int


# (i, j, shift): law_i(x) - law_j(x + shift)
Pair = Tuple[int, int, Tuple[int, ...]]


def _chunk_laws(model: WalkModel, plan: WindowPlan, probes: Sequence[_Probe],
                seeds: Sequence[int]) -> List[np.ndarray]:
    """
    Quenched laws of every probe on one chunk of seeded fields.

    Probes sharing a start are pushed once and read off at each of their
    target times.
    """
    occupancy = sample_batch(model.d, plan.spatial_extents, plan.time_range, model.p, seeds,
                             boundary_mode=model.boundary_mode, center=plan.center)
    xi = backward_pass(occupancy, model.d, model.periodic)
    del occupancy
    t_lo = plan.time_range[0]
    laws: List[Optional[np.ndarray]] = [None] * len(probes)
    groups: Dict[Tuple[Tuple[int, ...], int], Dict[int, List[int]]] = {}
    for i, probe in enumerate(probes):
        groups.setdefault((probe.x, probe.m), {}).setdefault(probe.target, []).append(i)
    for (x, m), targets in groups.items():
        index = tuple(c - lo for c, lo in zip(x, plan.lower))
        mass = np.zeros((len(seeds),) + plan.shape)
        mass[(slice(None),) + index] = 1.0
        for i in targets.get(m, ()):
            laws[i] = mass
        for t in range(m, max(targets)):
            if not model.periodic:
                _ensure_interior(mass, model.d, False, f"annealed step {t}->{t + 1}")
            mass = push(mass, xi[:, t - t_lo], xi[:, t + 1 - t_lo], model.d, model.periodic)
            for i in targets.get(t + 1, ()):
                laws[i] = mass
    return laws


def _chunk_moments(model: WalkModel, plan: WindowPlan, probes: Sequence[_Probe],
                   pairs: Sequence[Pair], seeds: Sequence[int]) -> Dict[str, np.ndarray]:
    """Per-probe sums and sums of squares, and the same for paired differences, over one chunk of seeds."""
    laws = _chunk_laws(model, plan, probes, seeds)
    out = {
        "sum": np.stack([law.sum(axis=0) for law in laws]),
        "sumsq": np.stack([(law ** 2).sum(axis=0) for law in laws]),
    }
    if pairs:
        diffs = [laws[i] - lattice.shifted(laws[j], shift, model.d, model.periodic) for i, j, shift in pairs]
        out["diff_sum"] = np.stack([diff.sum(axis=0) for diff in diffs])
        out["diff_sumsq"] = np.stack([(diff ** 2).sum(axis=0) for diff in diffs])
    return out


def _moments(model: WalkModel, plan: WindowPlan, probes: Sequence[_Probe], reps: int, base_seed: int,
             pairs: Sequence[Pair] = (), threads: int = 1,
             progress: bool = False) -> Dict[str, np.ndarray]:
    """
    Monte Carlo moments over ``reps`` environments.

    Seeds are split into fixed-size chunks merged in chunk order, so the
    result does not depend on the number of threads.
    """
    seeds = [derive_seed(base_seed, r) for r in range(reps)]
    chunk = max(1, Window.BATCH_SITE_BUDGET // max(plan.volume(), 1))
    chunks = [seeds[i:i + chunk] for i in range(0, reps, chunk)]
    tasks = (joblib.delayed(_chunk_moments)(model, plan, probes, pairs, c)
             for c in tqdm(chunks, desc="annealed", disable=not progress, leave=False))
    results = joblib.Parallel(n_jobs=threads)(tasks)
    total = {key: sum(r[key] for r in results) for key in results[0]}
    total["reps"] = np.asarray(reps)
    return total


def _mean_stderr(sums: np.ndarray, sumsq: np.ndarray, reps: int) -> Tuple[np.ndarray, np.ndarray]:
    mean = sums / reps
    if reps < 2:
        return mean, np.zeros_like(mean)
    variance = np.maximum(sumsq - reps * mean ** 2, 0.0) / (reps - 1)
    return mean, np.sqrt(variance / reps)


def dependency_cone(d: int, n_steps: int) -> np.ndarray:
    """
    Sites on which the law of X_n from (0, 0) depends for horizon n.

    Shape (n + 1, 2n + 3, ...): slice s holds the sup-norm ball of radius s.
    """
    extent = n_steps + 1
    coords = np.meshgrid(*[np.arange(-extent, extent + 1)] * d, indexing="ij")
    radius = np.max(np.abs(np.stack(coords)), axis=0)
    return np.stack([radius <= s for s in range(n_steps + 1)])


def _annealed_exact(model: WalkModel, n_steps: int) -> Tuple[np.ndarray, int]:
    cone = dependency_cone(model.d, n_steps)
    sites = int(cone.sum())
    if model.p in (0.0, 1.0):
        # one environment carries all the weight
        occupancy = (cone if model.p == 1.0 else np.zeros_like(cone))[None]
        weights = np.ones(1)
    else:
        if sites > Window.EXACT_MAX_SITES:
            raise CapacityError(f"exact annealed law needs 2^{sites} environments "
                                f"(limit 2^{Window.EXACT_MAX_SITES}); use mode='mc'")
        codes = np.arange(2 ** sites, dtype=np.int64)
        bits = ((codes[:, None] >> np.arange(sites)) & 1).astype(bool)
        occupancy = np.zeros((codes.size,) + cone.shape, dtype=bool)
        occupancy[:, cone] = bits
        opened = bits.sum(axis=1)
        weights = model.p ** opened * (1.0 - model.p) ** (sites - opened)
    xi = backward_pass(occupancy, model.d, periodic=False)
    mass = np.zeros((len(weights),) + cone.shape[1:])
    mass[(slice(None),) + (n_steps + 1,) * model.d] = 1.0
    for t in range(n_steps):
        mass = push(mass, xi[:, t], xi[:, t + 1], model.d, periodic=False)
    return np.tensordot(weights, mass, axes=1), sites


def estimate_annealed(model: WalkModel, start: Start, n_steps: int, mode: str = "mc",
                      reps: int = 1000, base_seed: int = 0, threads: int = 1,
                      anchor: Literal["relative", "absolute"] = "relative",
                      progress: bool = False) -> DistributionSlice:
    """
    Annealed law of X_{m+n_steps} from (y, m).

    ``exact`` enumerates every environment of the dependency cone (horizon
    m + n); ``mc`` averages the quenched law over ``reps`` seeded fields.
    With ``anchor="relative"`` the fields are hashed in coordinates
    relative to the start, so estimates from different starts are exact
    translates of each other.

    Raises:
        CapacityError: exact mode on a cone of more than 24 sites with 0 < p < 1
    """
    y, m = as_start(start, model.d)
    if mode == "exact":
        mass, sites = _annealed_exact(model, n_steps)
        check_mass(float(mass.sum()), f"exact annealed law n={n_steps}")
        lower = tuple(c - n_steps - 1 for c in y)
        return DistributionSlice(n=m + n_steps, lower=lower, mass=mass, label="annealed",
                                 provenance={"reps": "exact", "sites": sites, "p": model.p},
                                 stderr=np.zeros_like(mass))
    if mode != "mc":
        raise ValueError(f"unknown annealed mode {mode!r}")
    origin = ((0,) * model.d, 0) if anchor == "relative" else (y, m)
    plan = plan_window(model, origin, n_steps)
    ox, om = as_start(origin, model.d)
    moments = _moments(model, plan, [_Probe(ox, om, om + n_steps)], reps, base_seed,
                       threads=threads, progress=progress)
    mean, stderr = _mean_stderr(moments["sum"][0], moments["sumsq"][0], reps)
    lower = plan.lower
    if anchor == "relative":
        lower = tuple(lo + c for lo, c in zip(lower, y))
    return DistributionSlice(n=m + n_steps, lower=lower, mass=mean, label="annealed",
                             provenance={"reps": reps, "base_seed": base_seed, "p": model.p,
                                         "anchor": anchor, "horizon": plan.horizon - om + m},
                             stderr=stderr)


def estimate_annealed_series(model: WalkModel, n_values: Sequence[int], reps: int = 1000,
                             base_seed: int = 0, threads: int = 1,
                             progress: bool = False) -> Dict[int, DistributionSlice]:
    """
    Annealed laws of X_n from (0, 0) for several n on one set of fields.

    Every time shares the window of the largest n, so the laws are
    marginals of one sampled family of walks.
    """
    times = sorted({int(n) for n in n_values})
    origin = ((0,) * model.d, 0)
    plan = plan_window(model, origin, times[-1])
    zero = (0,) * model.d
    moments = _moments(model, plan, [_Probe(zero, 0, n) for n in times], reps, base_seed,
                       threads=threads, progress=progress)
    out = {}
    for i, n in enumerate(times):
        mean, stderr = _mean_stderr(moments["sum"][i], moments["sumsq"][i], reps)
        check_mass(float(mean.sum()), f"annealed law n={n}")
        out[n] = DistributionSlice(n=n, lower=plan.lower, mass=mean, label="annealed",
                                   provenance={"reps": reps, "base_seed": base_seed, "p": model.p,
                                               "anchor": "relative", "horizon": plan.horizon},
                                   stderr=stderr)
    return out


@dataclass(frozen=True)
class PairedDifference:
    """Mean and standard error of the difference of two laws on common fields."""

    lower: Tuple[int, ...]
    mean: np.ndarray
    stderr: np.ndarray
    reps: int

    def sup(self) -> float:
        return float(np.max(np.abs(self.mean))) if self.mean.size else 0.0


def annealed_contrasts(model: WalkModel, probes: Sequence[Tuple[Start, int]], pairs: Sequence[Pair],
                       reps: int, base_seed: int = 0,
                       threads: int = 1) -> Tuple[List[DistributionSlice], List[PairedDifference]]:
    """
    Annealed laws of several (start, target time) probes and paired differences between them.

    All probes run on the same fields; pair (i, j, s) estimates
    P_i(X = x) - P_j(X = x + s) per field before averaging.
    """
    starts = [as_start(start, model.d) for start, _ in probes]
    targets = [int(n) for _, n in probes]
    (y0, _), m0 = starts[0], min(m for _, m in starts)
    spread = max(max(abs(a - b) for a, b in zip(y, y0)) for y, _ in starts)
    spread += max((max(abs(s) for s in shift) for _, _, shift in pairs if len(shift)), default=0)
    plan = plan_window(model, (y0, m0), max(targets) - m0, spread=spread)
    moments = _moments(model, plan, [_Probe(y, m, n) for (y, m), n in zip(starts, targets)],
                       reps, base_seed, pairs=[(i, j, tuple(s)) for i, j, s in pairs], threads=threads)
    laws = []
    for i, ((y, m), n) in enumerate(zip(starts, targets)):
        mean, stderr = _mean_stderr(moments["sum"][i], moments["sumsq"][i], reps)
        laws.append(DistributionSlice(n=n, lower=plan.lower, mass=mean, label="annealed",
                                      provenance={"reps": reps, "base_seed": base_seed,
                                                  "start": [list(y), m], "anchor": "absolute"},
                                      stderr=stderr))
    diffs = []
    for k in range(len(pairs)):
        mean, stderr = _mean_stderr(moments["diff_sum"][k], moments["diff_sumsq"][k], reps)
        diffs.append(PairedDifference(lower=plan.lower, mean=mean, stderr=stderr, reps=reps))
    return laws, diffs


def paired_annealed_difference(model: WalkModel, first: Tuple[Start, int], second: Tuple[Start, int],
                               reps: int, base_seed: int = 0, threads: int = 1) -> PairedDifference:
    """
    P^(y1,m1)(X_{n1} = x) - P^(y2,m2)(X_{n2} = x) estimated on shared fields.

    ``first`` and ``second`` are (start, target time) pairs; both walks run
    on the same environments, which removes most of the Monte Carlo noise
    from the difference.
    """
    _, diffs = annealed_contrasts(model, [first, second], [(0, 1, (0,) * model.d)], reps,
                                  base_seed, threads)
    return diffs[0]


def hitting_curve(model: WalkModel, n_values: Sequence[int], reps: int, base_seed: int = 0,
                  threads: int = 1) -> pd.DataFrame:
    """
    P(xi_i(X_i) = 0 for i = 1..n) for each n, averaged over environments.

    Within one environment the probability is computed exactly by killing
    the walk's mass on the backbone, so only the environment is sampled.
    """
    n_max = max(n_values)
    plan = plan_window(model, None, n_max)
    seeds = [derive_seed(base_seed, r) for r in range(reps)]
    chunk = max(1, Window.BATCH_SITE_BUDGET // max(plan.volume(), 1))
    tasks = (joblib.delayed(_hitting_chunk)(model, plan, sorted(set(n_values)), seeds[i:i + chunk])
             for i in range(0, reps, chunk))
    per_rep = np.concatenate(joblib.Parallel(n_jobs=threads)(tasks), axis=0)
    rows = []
    for j, n in enumerate(sorted(set(n_values))):
        est = mean_estimate(per_rep[:, j])
        rows.append({"n": n, "value": est.value, "stderr": est.stderr, "reps": reps})
    return pd.DataFrame(rows)


def _hitting_chunk(model: WalkModel, plan: WindowPlan, n_values: Sequence[int],
                   seeds: Sequence[int]) -> np.ndarray:
    occupancy = sample_batch(model.d, plan.spatial_extents, plan.time_range, model.p, seeds,
                             boundary_mode=model.boundary_mode, center=plan.center)
    xi = backward_pass(occupancy, model.d, model.periodic)
    t_lo = plan.time_range[0]
    mass = np.zeros((len(seeds),) + plan.shape)
    mass[(slice(None),) + tuple(e for e in plan.spatial_extents)] = 1.0
    out = np.empty((len(seeds), len(n_values)))
    wanted = {n: j for j, n in enumerate(n_values)}
    for t in range(0, max(n_values)):
        _ensure_interior(mass, model.d, model.periodic, f"hitting step {t}->{t + 1}")
        above = xi[:, t + 1 - t_lo]
        mass = push(mass, xi[:, t - t_lo], above, model.d, model.periodic) * ~above
        if t + 1 in wanted:
            out[:, wanted[t + 1]] = mass.reshape(len(seeds), -1).sum(axis=1)
    if 0 in wanted:
        out[:, wanted[0]] = 1.0
    return out


def hitting_tail(model: WalkModel, n: int, reps: int, base_seed: int = 0, threads: int = 1) -> Estimate:
    """Frequency of {xi_i(X_i) = 0 for i = 1..n} from (0, 0), with its standard error."""
    row = hitting_curve(model, [n], reps, base_seed, threads).iloc[0]
    return Estimate(float(row["value"]), float(row["stderr"]), int(reps))


# ======================================================================
# CACHE
# ======================================================================

def _annealed_payload(d: int, p: float, boundary_mode: str, horizon_margin: Optional[int],
                      spatial_margin: int, n_values: Tuple[int, ...], reps: int, base_seed: int,
                      threads: int = 1) -> Dict[int, Dict[str, Any]]:
    model = WalkModel(d=d, p=p, boundary_mode=boundary_mode, horizon_margin=horizon_margin,
                      spatial_margin=spatial_margin)
    laws = estimate_annealed_series(model, n_values, reps=reps, base_seed=base_seed, threads=threads)
    return {n: {"lower": law.lower, "mass": law.mass, "stderr": law.stderr, "provenance": law.provenance}
            for n, law in laws.items()}


class AnnealedCache:
    """
    Disk cache of Monte Carlo annealed laws from the origin.

    Keyed by (d, p, boundary, margins, times, reps, base seed). A hit returns
    the arrays of the cold computation unchanged.
    """

    def __init__(self, location=None, enabled: bool = True):
        if location is None and enabled:
            location = cache_directory() / "annealed"
        self.memory = joblib.Memory(location=location if enabled else None, verbose=0)
        self._payload = self.memory.cache(_annealed_payload, ignore=["threads"])

    def series(self, model: WalkModel, n_values: Sequence[int], reps: int, base_seed: int,
               threads: int = 1) -> Dict[int, DistributionSlice]:
        """Laws at every n of ``n_values`` from (0, 0), sampled on shared fields."""
        times = tuple(sorted({int(n) for n in n_values}))
        payload = self._payload(model.d, float(model.p), model.boundary_mode, model.horizon_margin,
                                model.spatial_margin, times, int(reps), int(base_seed), threads=threads)
        return {
            n: DistributionSlice(n=n, lower=tuple(entry["lower"]), mass=entry["mass"], label="annealed",
                                 provenance=dict(entry["provenance"]), stderr=entry["stderr"])
            for n, entry in payload.items()
        }

    def get(self, model: WalkModel, n: int, reps: int, base_seed: int, threads: int = 1,
            start: Optional[Start] = None) -> DistributionSlice:
        """Annealed law at time m + n from ``start`` (default the origin)."""
        law = self.series(model, [n], reps, base_seed, threads)[int(n)]
        if start is not None:
            y, m = as_start(start, model.d)
            law = law.shifted(y, m)
        return law

    def clear(self) -> None:
        self.memory.clear(warn=False)
