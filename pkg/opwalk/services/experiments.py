"""
Box-level comparisons between quenched and annealed laws.

Partitions of Z^d into boxes, the multiscale ladder of box total variation
distances, good and social box classification, the two-stage coupling of
a quenched and an annealed walk, pair mixing and annealed derivative
estimates.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd

from opwalk.services import lattice
from opwalk.services.cluster import BackboneField
from opwalk.services.environment import derive_seed
from opwalk.services.walk import (
    DistributionSlice,
    WalkModel,
    align,
    annealed_contrasts,
    embed,
    escape_probabilities,
    plan_window,
    propagate_mass,
    propagate_many,
    propagate_quenched,
    sample_field,
    support_cones,
)
from opwalk.utils.defaults import Bounds, Window
from opwalk.utils.errors import ConfigurationError
from opwalk.utils.logging import get_logger

logger = get_logger(__name__)


# ======================================================================
# BOX PARTITIONS
# ======================================================================

@dataclass(frozen=True)
class BoxPartition:
    """Boxes [offset + b*side, offset + (b+1)*side) tiling Z^d."""

    side: int
    offset: Tuple[int, ...]
    d: int

    def __post_init__(self):
        if self.side < 1:
            raise ConfigurationError(f"box side must be positive, got {self.side}")
        if len(self.offset) != self.d:
            raise ConfigurationError(f"offset {self.offset} does not match d={self.d}")

    @classmethod
    def of(cls, side: float, d: int, offset: Optional[Sequence[int]] = None) -> "BoxPartition":
        """Partition with side floor(side), at least 1."""
        offset = (0,) * d if offset is None else tuple(int(o) for o in offset)
        return cls(side=max(1, int(math.floor(side))), offset=offset, d=d)

    def box_of(self, x: Sequence[int]) -> Tuple[int, ...]:
        return tuple((int(c) - o) // self.side for c, o in zip(x, self.offset))

    def coarsened(self, factor: int) -> "BoxPartition":
        """Every box of the result is a union of ``factor**d`` boxes of this one."""
        return BoxPartition(side=self.side * factor, offset=self.offset, d=self.d)

    def index(self, lower: Sequence[int], shape: Sequence[int]):
        """(flat box ids, box grid dims, first box) for a grid."""
        return lattice.box_index(lower, shape, self.side, self.offset)

    def sites(self, box: Sequence[int]) -> np.ndarray:
        """All sites of one box, shape (side**d, d), in C order."""
        axes = [np.arange(o + b * self.side, o + (b + 1) * self.side) for b, o in zip(box, self.offset)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def boxes_meeting(self, radius: int) -> List[Tuple[int, ...]]:
        """Boxes that meet the sup-norm ball of ``radius`` around the origin, in C order."""
        ranges = [range((-radius - o) // self.side, (radius - o) // self.side + 1) for o in self.offset]
        grids = np.meshgrid(*[np.array(r) for r in ranges], indexing="ij")
        return [tuple(int(c) for c in row) for row in np.stack([g.ravel() for g in grids], axis=1)]


def _box_frame(first: Sequence[int], dims: Sequence[int], values: Dict[str, np.ndarray]) -> pd.DataFrame:
    coords = np.unravel_index(np.arange(int(np.prod(dims))), tuple(dims))
    frame = pd.DataFrame({f"b{i + 1}": coords[i] + first[i] for i in range(len(dims))})
    for name, column in values.items():
        frame[name] = column
    return frame


def box_masses(law: DistributionSlice, partition: BoxPartition) -> pd.Series:
    """Mass of every box meeting the law's grid, indexed by box coordinates."""
    ids, dims, first = partition.index(law.lower, law.shape)
    sums = lattice.box_sums(law.mass, ids, int(np.prod(dims)))
    frame = _box_frame(first, dims, {"mass": sums})
    return frame.set_index([f"b{i + 1}" for i in range(law.d)])["mass"]


def tv_on_boxes(first: DistributionSlice, second: DistributionSlice, partition: BoxPartition) -> float:
    """sum over boxes of |nu_A(box) - nu_B(box)|, in [0, 2]."""
    if first.n != second.n:
        raise ConfigurationError(f"laws at different times {first.n} and {second.n}")
    lower, (a, b) = align(first, second)
    ids, dims, _ = partition.index(lower, a.shape)
    n_boxes = int(np.prod(dims))
    return float(np.abs(lattice.box_sums(a, ids, n_boxes) - lattice.box_sums(b, ids, n_boxes)).sum())


# ======================================================================
# SCALE LADDER
# ======================================================================

def ladder_scales(N: int, theta: float, M: float) -> Tuple[List[int], int, List[int]]:
    """
    Scales n_j = floor(N^(1/2^j)), the depth r(N) and checkpoint times N_k.

    r(N) is the smallest r with n_r^theta <= M; N_0 = N - (n_1 + .. + n_r)
    and N_k = N_{k-1} + n_k, so N_r = N.

    Raises:
        ConfigurationError: N^theta <= M already (r(N) = 0)
    """
    scales = [int(N)]
    while scales[-1] ** theta > M:
        scales.append(math.isqrt(scales[-1]))
    r = len(scales) - 1
    if r < 1:
        raise ConfigurationError(f"N={N} too small for a ladder: N^theta <= M={M}")
    checkpoints = [N - sum(scales[1:])]
    for n_k in scales[1:]:
        checkpoints.append(checkpoints[-1] + n_k)
    return scales, r, checkpoints


@dataclass(frozen=True)
class ScaleLadder:
    N: int
    theta: float
    M: float
    scales: Tuple[int, ...]
    checkpoints: Tuple[int, ...]
    lambdas: Tuple[float, ...]

    @property
    def depth(self) -> int:
        return len(self.scales) - 1

    def sides(self) -> Tuple[int, ...]:
        return tuple(max(1, int(math.floor(n ** self.theta))) for n in self.scales)

    def increments_hold(self, constant: float = Bounds.LADDER_C, alpha: float = Bounds.LADDER_ALPHA) -> bool:
        """lambda_k <= lambda_{k-1} + constant * n_k^-alpha for every k >= 1."""
        return all(self.lambdas[k] <= self.lambdas[k - 1] + constant * self.scales[k] ** -alpha
                   for k in range(1, len(self.lambdas)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "k": np.arange(len(self.scales)),
            "n_k": self.scales,
            "N_k": self.checkpoints,
            "lambda_k": self.lambdas,
        })


def scale_ladder(field: BackboneField, N: int, theta: float, M: float,
                 annealed: Mapping[int, DistributionSlice]) -> ScaleLadder:
    """
    lambda_k at every checkpoint N_k, boxes of side floor(n_k^theta).

    The quenched law from (0, 0) is pushed once through all checkpoints;
    ``annealed`` maps each N_k to the annealed law from (0, 0).
    """
    scales, r, checkpoints = ladder_scales(N, theta, M)
    missing = [t for t in checkpoints if t not in annealed]
    if missing:
        raise ConfigurationError(f"annealed laws missing at checkpoints {missing}")
    origin = (0,) * field.d
    mass = propagate_many(field, [origin], 0, 0)[0]
    t = 0
    lambdas = []
    for n_k, t_k in zip(scales, checkpoints):
        mass = propagate_mass(field, mass, t, t_k - t)
        t = t_k
        quenched = DistributionSlice(n=t_k, lower=field.env.lower, mass=mass)
        partition = BoxPartition.of(n_k ** theta, field.d)
        lambdas.append(tv_on_boxes(quenched, annealed[t_k], partition))
    logger.debug("ladder", extra={"N": N, "seed": field.env.seed})
    return ScaleLadder(N=N, theta=theta, M=M, scales=tuple(scales), checkpoints=tuple(checkpoints),
                       lambdas=tuple(lambdas))


# ======================================================================
# GOOD AND SOCIAL BOXES
# ======================================================================

@dataclass(frozen=True, eq=False)
class BoxMap:
    """Per-box classification: box coordinates, a boolean verdict and counts."""

    partition: BoxPartition
    boxes: pd.DataFrame
    verdict: str

    def fraction(self, value: bool = True) -> float:
        if self.boxes.empty:
            return float("nan")
        return float(np.mean(self.boxes[self.verdict] == value))

    def box_set(self, value: bool = True) -> List[Tuple[int, ...]]:
        cols = [f"b{i + 1}" for i in range(self.partition.d)]
        chosen = self.boxes.loc[self.boxes[self.verdict] == value, cols]
        return [tuple(int(c) for c in row) for row in chosen.itertuples(index=False)]


def good_site_threshold(n_k: int, theta: float, eps: float, d: int) -> float:
    return n_k ** (theta * d - d / 2 - eps)


def escape_radius(n_k: int) -> float:
    return math.sqrt(n_k) * math.log(n_k) ** 3 if n_k > 1 else 0.0


def escape_bound(n_k: int, C: float = Bounds.GOOD_ESCAPE_C, c: float = Bounds.GOOD_ESCAPE_c) -> float:
    return C * n_k ** (-c * math.log(n_k)) if n_k > 1 else C


def classify_good(field: BackboneField, partition: BoxPartition, n_k: int, theta: float, eps: float,
                  annealed: DistributionSlice, m: int = 0, radius: int = 0,
                  C: float = Bounds.GOOD_ESCAPE_C, c: float = Bounds.GOOD_ESCAPE_c) -> BoxMap:
    """
    Good/bad verdict for every box of ``partition`` meeting the ball of ``radius``.

    A site (x, m) is good when xi_m(x) = 0, or when both its box law
    deviation on boxes of side floor(n_k^theta) stays below
    n_k^(theta d - d/2 - eps) after subtracting the annealed standard error
    and its escape probability beyond sqrt(n_k) log^3 n_k stays below
    C n_k^(-c log n_k). A box is good iff all its sites are.

    ``annealed`` is the annealed law of X_{n_k} from (0, 0); the law from
    (x, m) is its translate.
    """
    if annealed.n != n_k:
        raise ConfigurationError(f"annealed law at time {annealed.n}, expected n_k={n_k}")
    env = field.env
    fine = BoxPartition.of(n_k ** theta, field.d, partition.offset)
    ids, dims, _ = fine.index(env.lower, env.shape)
    n_fine = int(np.prod(dims))
    threshold = good_site_threshold(n_k, theta, eps, field.d)
    bound = escape_bound(n_k, C, c)
    variance = annealed.stderr ** 2 if annealed.stderr is not None else np.zeros_like(annealed.mass)

    boxes = partition.boxes_meeting(radius)
    all_sites = np.concatenate([partition.sites(box) for box in boxes])
    xi_m = field.slice(m)
    on = np.array([xi_m[env.site_index(x)] for x in all_sites], dtype=bool)
    good = ~on
    worst = np.zeros(len(all_sites))
    escapes = np.zeros(len(all_sites))
    active = [tuple(int(v) for v in x) for x in all_sites[on]]
    if active:
        quenched = propagate_many(field, active, m, n_k)
        q_boxes = lattice.box_sums(quenched, ids, n_fine)
        a_boxes = np.empty_like(q_boxes)
        se_boxes = np.empty_like(q_boxes)
        for i, x in enumerate(active):
            lower = tuple(lo + xi for lo, xi in zip(annealed.lower, x))
            a_boxes[i] = lattice.box_sums(embed(annealed.mass, lower, env.lower, env.shape), ids, n_fine)
            se_boxes[i] = np.sqrt(lattice.box_sums(
                embed(variance, lower, env.lower, env.shape, strict=False), ids, n_fine))
        deviation = np.max(np.abs(q_boxes - a_boxes) - se_boxes, axis=1)
        escape = escape_probabilities(field, active, m, n_k, escape_radius(n_k))
        worst[on] = deviation
        escapes[on] = escape
        good[on] = (deviation <= threshold) & (escape <= bound)

    per_box = np.repeat(np.arange(len(boxes)), partition.side ** field.d)
    frame = pd.DataFrame(boxes, columns=[f"b{i + 1}" for i in range(field.d)])
    frame["good"] = pd.Series(good).groupby(per_box).all().to_numpy()
    frame["bad_sites"] = pd.Series(~good).groupby(per_box).sum().to_numpy()
    frame["max_deviation"] = pd.Series(worst).groupby(per_box).max().to_numpy()
    frame["max_escape"] = pd.Series(escapes).groupby(per_box).max().to_numpy()
    logger.debug("good boxes", extra={"n": n_k, "boxes": len(boxes), "seed": env.seed})
    return BoxMap(partition=partition, boxes=frame, verdict="good")


def classify_social(field: BackboneField, M: int, C: float = Bounds.SOCIAL_C, N: int = 0,
                    radius: int = 0) -> BoxMap:
    """
    Social verdict for every box of side M meeting the ball of ``radius`` at time N.

    A box is social when every pair of its sites has a common site of
    positive quenched probability at time N + ceil(C M). Positivity is
    propagated exactly.
    """
    partition = BoxPartition.of(M, field.d)
    steps = int(math.ceil(C * M))
    boxes = partition.boxes_meeting(radius)
    size = partition.side ** field.d
    all_sites = [tuple(int(v) for v in x) for box in boxes for x in partition.sites(box)]
    cones = support_cones(field, all_sites, N, steps).reshape(len(all_sites), -1)
    social = np.empty(len(boxes), dtype=bool)
    for b in range(len(boxes)):
        block = cones[b * size:(b + 1) * size].astype(np.int32)
        social[b] = bool(np.all(block @ block.T > 0))
    frame = pd.DataFrame(boxes, columns=[f"b{i + 1}" for i in range(field.d)])
    frame["social"] = social
    logger.debug("social boxes", extra={"side": M, "boxes": len(boxes), "seed": field.env.seed})
    return BoxMap(partition=partition, boxes=frame, verdict="social")


def non_social_mass(social: BoxMap, law: DistributionSlice) -> float:
    """Mass ``law`` puts on the boxes classified non-social."""
    masses = box_masses(law, social.partition)
    # a single-level index holds plain ints, box_set yields 1-tuples
    lookup = {key if isinstance(key, tuple) else (key,): value for key, value in masses.items()}
    return float(sum(lookup.get(box, 0.0) for box in social.box_set(False)))


# ======================================================================
# COUPLING
# ======================================================================

def tv_coupling(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Coupling of two laws on the same finite set with diagonal min(a, b).

    Residual masses are paired in index order, north-west corner style,
    so the result is deterministic.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    plan = np.diag(np.minimum(a, b))
    rest_a = a - np.diag(plan)
    rest_b = b - np.diag(plan)
    i = j = 0
    while i < len(a) and j < len(b):
        if rest_a[i] <= 0:
            i += 1
            continue
        if rest_b[j] <= 0:
            j += 1
            continue
        moved = min(rest_a[i], rest_b[j])
        plan[i, j] += moved
        rest_a[i] -= moved
        rest_b[j] -= moved
    return plan


@dataclass(frozen=True, eq=False)
class BoxTransition:
    """Annealed joint law of (box of X_{N-M}, X_N) from (0, 0), rows indexed by box id."""

    N: int
    M: int
    lower: Tuple[int, ...]
    shape: Tuple[int, ...]
    joint: np.ndarray = field(repr=False)
    reps: int = 0

    @property
    def box_law(self) -> np.ndarray:
        return self.joint.reshape(self.joint.shape[0], -1).sum(axis=1)

    @property
    def site_law(self) -> np.ndarray:
        return self.joint.sum(axis=0)


def _transition_chunk(model: WalkModel, plan, N: int, M: int, seeds: Sequence[int]) -> np.ndarray:
    partition = BoxPartition.of(M, model.d)
    ids, dims, _ = partition.index(plan.lower, plan.shape)
    n_boxes = int(np.prod(dims))
    joint = np.zeros((n_boxes,) + plan.shape)
    origin = (0,) * model.d
    for seed in seeds:
        fld = sample_field(model, seed, plan)
        mass = propagate_many(fld, [origin], 0, N - M)[0]
        occupied = np.unique(ids[mass > 0])
        split = np.stack([np.where(ids == box, mass, 0.0) for box in occupied])
        joint[occupied] += propagate_mass(fld, split, N - M, M)
    return joint


def annealed_box_transition(model: WalkModel, N: int, M: int, reps: int, base_seed: int = 0,
                            threads: int = 1) -> BoxTransition:
    """
    E[P_omega(X_{N-M} in box, X_N = x)] over ``reps`` fields, boxes of side M.

    Fields use the same window and seeds as the annealed law of X_N from
    (0, 0), so summing over boxes reproduces that estimate.
    """
    if not 1 <= M <= N:
        raise ConfigurationError(f"need 1 <= M <= N, got M={M}, N={N}")
    plan = plan_window(model, None, N)
    seeds = [derive_seed(base_seed, r) for r in range(reps)]
    chunk = max(1, Window.BATCH_SITE_BUDGET // max(plan.volume(), 1))
    tasks = (joblib.delayed(_transition_chunk)(model, plan, N, M, seeds[i:i + chunk])
             for i in range(0, reps, chunk))
    joint = sum(joblib.Parallel(n_jobs=threads)(tasks)) / reps
    return BoxTransition(N=N, M=M, lower=plan.lower, shape=plan.shape, joint=joint, reps=reps)


@dataclass(frozen=True)
class CouplingSummary:
    N: int
    M: int
    theta: float
    diagonal_mass: float
    quenched_residual: float
    annealed_residual: float
    boxes: int

    def as_dict(self) -> Dict[str, float]:
        return {"theta": self.theta, "diagonal_mass": self.diagonal_mass,
                "quenched_residual": self.quenched_residual, "annealed_residual": self.annealed_residual}


def build_coupling(field: BackboneField, transition: BoxTransition,
                   annealed: Optional[DistributionSlice] = None) -> Tuple[CouplingSummary, float]:
    """
    Two-stage coupling of the quenched and annealed walks from (0, 0) up to time N.

    Stage one couples the box laws at N - M optimally; stage two continues
    each walk independently from its box to time N. Theta is the
    probability that both walks sit on the same site at N. The marginal
    residuals compare the coupling's marginals with the quenched law and
    with ``annealed`` (the annealed law at N; defaults to the transition's
    own site marginal).
    """
    N, M = transition.N, transition.M
    env = field.env
    partition = BoxPartition.of(M, field.d)
    ids, dims, _ = partition.index(env.lower, env.shape)
    n_boxes = int(np.prod(dims))
    if env.lower != transition.lower or env.shape != transition.shape:
        raise ConfigurationError("field and box transition were sampled on different windows")
    joint = transition.joint

    q_mid = propagate_many(field, [(0,) * field.d], 0, N - M)[0]
    q_box = lattice.box_sums(q_mid, ids, n_boxes)
    a_box = joint.reshape(n_boxes, -1).sum(axis=1)
    coupling = tv_coupling(q_box, a_box)

    occupied = np.flatnonzero(q_box > 0)
    q_cond = np.zeros((n_boxes,) + env.shape)
    if occupied.size:
        split = np.stack([np.where(ids == box, q_mid, 0.0) for box in occupied])
        q_cond[occupied] = propagate_mass(field, split, N - M, M) / q_box[occupied].reshape((-1,) + (1,) * field.d)
    a_cond = np.divide(joint, a_box.reshape((-1,) + (1,) * field.d),
                       out=np.zeros_like(joint), where=a_box.reshape((-1,) + (1,) * field.d) > 0)

    Q = q_cond.reshape(n_boxes, -1)
    A = a_cond.reshape(n_boxes, -1)
    theta = float(np.sum(coupling * (Q @ A.T)))

    quenched_end = propagate_quenched(field, ((0,) * field.d, 0), N).mass
    first_marginal = (coupling.sum(axis=1) @ Q).reshape(env.shape)
    second_marginal = (coupling.sum(axis=0) @ A).reshape(env.shape)
    reference = joint.sum(axis=0) if annealed is None else embed(annealed.mass, annealed.lower,
                                                                  env.lower, env.shape)
    summary = CouplingSummary(
        N=N, M=M, theta=theta,
        diagonal_mass=float(np.trace(coupling)),
        quenched_residual=float(np.abs(first_marginal - quenched_end).sum()),
        annealed_residual=float(np.abs(second_marginal - reference).sum()),
        boxes=int(occupied.size),
    )
    return summary, summary.diagonal_mass


# ======================================================================
# PAIR MIXING AND DERIVATIVES
# ======================================================================

def pair_tv(field: BackboneField, x: Sequence[int], y: Sequence[int], n: int, m: int = 0) -> float:
    """Total variation distance between the quenched laws at m + n from (x, m) and (y, m)."""
    laws = propagate_many(field, [tuple(x), tuple(y)], m, n)
    return 0.5 * float(np.abs(laws[0] - laws[1]).sum())


DERIVATIVE_TYPES = ("start_space", "start_time", "target_space", "target_time")


def partition_oscillation(law: np.ndarray, lower: Sequence[int], partition: BoxPartition,
                          stderr: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """
    sum over boxes, sum over x in the box, of max_box(P) - P(x), with a propagated error.
    """
    ids, _, _ = partition.index(lower, law.shape)
    frame = pd.DataFrame({"box": ids.ravel(), "p": law.ravel(),
                          "se": np.zeros(law.size) if stderr is None else stderr.ravel()})
    grouped = frame.groupby("box")
    top = grouped["p"].transform("max")
    value = float((top - frame["p"]).sum())
    top_se = frame.loc[grouped["p"].idxmax(), ["box", "se"]].set_index("box")["se"]
    counts = grouped.size()
    error = math.sqrt(float(((counts * top_se.reindex(counts.index)) ** 2).sum() + (frame["se"] ** 2).sum()))
    return value, error


def derivative_estimates(model: WalkModel, n_values: Sequence[int], reps: int, base_seed: int = 0,
                         eps: float = 0.24, threads: int = 1) -> pd.DataFrame:
    """
    Scaled annealed finite differences for each n.

    Rows: one per derivative type with n^((d+1)/2) sup_x |difference|, and
    one ``partition`` row with the box oscillation sum on boxes of side
    floor(n^eps) scaled by n^(1/2 - 3 d eps). Differences are estimated
    per field before averaging.
    """
    d = model.d
    zero = (0,) * d
    e1 = (1,) + (0,) * (d - 1)
    rows = []
    for n in sorted(set(int(v) for v in n_values)):
        if n < 2:
            raise ConfigurationError(f"derivative estimates need n >= 2, got {n}")
        probes = [((zero, 0), n), ((e1, 0), n), ((zero, 1), n), ((zero, 0), n - 1)]
        pairs = [(0, 1, zero), (0, 2, zero), (0, 0, e1), (0, 3, zero)]
        laws, diffs = annealed_contrasts(model, probes, pairs, reps, base_seed, threads)
        scale = n ** ((d + 1) / 2)
        for name, diff in zip(DERIVATIVE_TYPES, diffs):
            at = np.unravel_index(np.argmax(np.abs(diff.mean)), diff.mean.shape)
            rows.append({"n": n, "statistic": name, "value": scale * diff.sup(),
                         "stderr": scale * float(diff.stderr[at]), "reps": reps})
        partition = BoxPartition.of(n ** eps, d)
        oscillation, error = partition_oscillation(laws[0].mass, laws[0].lower, partition, laws[0].stderr)
        factor = n ** (0.5 - 3 * d * eps)
        rows.append({"n": n, "statistic": "partition", "value": factor * oscillation,
                     "stderr": factor * error, "reps": reps})
        logger.debug("derivative estimates", extra={"n": n, "reps": reps})
    return pd.DataFrame(rows)
