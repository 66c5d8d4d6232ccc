"""
Hybrid measures, convolutions and local limit error functionals.

Hybrid measures reweight a walk law by the prefactor, pointwise
(annealed x prefactor) or within partition boxes (box quenched x
prefactor). Convolving a measure at time n - k with k quenched steps and
comparing in L1 splits the quenched local limit error into terms that
are measured separately.
"""

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from opwalk.services import lattice
from opwalk.services.cluster import BackboneField
from opwalk.services.prefactor import PrefactorSlice, cesaro_prefactor
from opwalk.services.walk import (
    DistributionSlice,
    align,
    check_mass,
    embed,
    propagate_mass,
    propagate_quenched,
)
from opwalk.utils.defaults import Tolerance
from opwalk.utils.errors import ConfigurationError, DegenerateMeasureError
from opwalk.utils.logging import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class HybridMeasure:
    """A unit-mass measure on one slice with its construction tag."""

    slice: DistributionSlice
    kind: str
    Z: Optional[float] = None
    box_side: Optional[int] = None
    degenerate_boxes: int = 0

    @property
    def n(self) -> int:
        return self.slice.n


@dataclass(frozen=True)
class GaussianReference:
    """Centred Gaussian with covariance sigma2 * n * I_d, evaluated on lattice sites."""

    d: int
    sigma2: float
    n: int

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigurationError(f"sigma2 must be positive, got {self.sigma2}")

    def density(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        """Density at the grid spanned by per-axis coordinates."""
        if self.n == 0:
            point = np.ones([len(c) for c in coords])
            for axis, c in enumerate(coords):
                view = [1] * len(coords)
                view[axis] = len(c)
                point = point * (c == 0).reshape(view)
            return point
        scale = math.sqrt(self.sigma2 * self.n)
        out = np.ones([len(c) for c in coords])
        for axis, c in enumerate(coords):
            view = [1] * len(coords)
            view[axis] = len(c)
            out = out * stats.norm.pdf(c, scale=scale).reshape(view)
        return out


def _on_psi_grid(law: DistributionSlice, psi: PrefactorSlice) -> np.ndarray:
    if law.n != psi.n:
        raise ConfigurationError(f"law at time {law.n} paired with prefactor at time {psi.n}")
    return embed(law.mass, law.lower, psi.lower, psi.shape)


def ann_times_pre(annealed: DistributionSlice, psi: PrefactorSlice) -> Tuple[HybridMeasure, float]:
    """
    nu(x) = P(X_n = x) psi(x, n) / Z with Z = sum_x P(X_n = x) psi(x, n).

    Raises:
        DegenerateMeasureError: Z = 0
    """
    weights = _on_psi_grid(annealed, psi) * psi.values
    Z = float(weights.sum())
    if Z <= 0:
        raise DegenerateMeasureError(f"ann x pre at n={annealed.n}: prefactor vanishes on the annealed support")
    law = DistributionSlice(n=annealed.n, lower=psi.lower, mass=weights / Z, label="hybrid",
                            provenance={**annealed.provenance, "kind": "ann_x_pre", "N": psi.N})
    return HybridMeasure(slice=law, kind="ann_x_pre", Z=Z), Z


def box_que_times_pre(quenched: DistributionSlice, psi: PrefactorSlice, side: int,
                      offset: Optional[Sequence[int]] = None, strict: bool = False) -> HybridMeasure:
    """
    nu(x) = P_omega(X_n in box(x)) psi(x) / sum_{y in box(x)} psi(y).

    A box with quenched mass but no prefactor weight is degenerate: its
    mass is spread uniformly over the box and counted, or raised when
    ``strict``.
    """
    if side < 1:
        raise ConfigurationError(f"box side must be positive, got {side}")
    offset = (0,) * len(psi.lower) if offset is None else tuple(offset)
    q = _on_psi_grid(quenched, psi)
    ids, dims, _ = lattice.box_index(psi.lower, psi.shape, side, offset)
    n_boxes = int(np.prod(dims))
    box_q = lattice.box_sums(q, ids, n_boxes)
    box_psi = lattice.box_sums(psi.values, ids, n_boxes)
    box_size = np.bincount(ids.ravel(), minlength=n_boxes)
    degenerate = (box_q > 0) & (box_psi <= 0)
    if degenerate.any():
        count = int(degenerate.sum())
        if strict:
            raise DegenerateMeasureError(f"{count} boxes carry quenched mass but no prefactor weight")
        logger.warning("degenerate boxes redistributed uniformly", extra={"boxes": count, "side": side})
    safe_psi = np.where(box_psi > 0, box_psi, 1.0)
    mass = np.where(degenerate[ids], box_q[ids] / box_size[ids], box_q[ids] * psi.values / safe_psi[ids])
    mass = np.where(box_q[ids] > 0, mass, 0.0)
    law = DistributionSlice(n=quenched.n, lower=psi.lower, mass=mass, label="hybrid",
                            provenance={**quenched.provenance, "kind": "box_que_x_pre", "box_side": side,
                                        "degenerate_boxes": int(degenerate.sum())})
    return HybridMeasure(slice=law, kind="box_que_x_pre", box_side=side,
                         degenerate_boxes=int(degenerate.sum()))


def convolve(measure, k: int, field: BackboneField) -> HybridMeasure:
    """
    (nu * que)_k: mass(x, n) = sum_y nu(y, n - k) P_omega^(y, n-k)(X_n = x).

    Accepts a HybridMeasure or a DistributionSlice at time n - k.
    """
    base = measure.slice if isinstance(measure, HybridMeasure) else measure
    env = field.env
    start = embed(base.mass, base.lower, env.lower, env.shape)
    mass = propagate_mass(field, start, base.n, k)
    check_mass(float(mass.sum()), f"convolution over {k} steps", expected=float(base.mass.sum()))
    law = DistributionSlice(n=base.n + k, lower=env.lower, mass=mass, label="hybrid",
                            provenance={**base.provenance, "convolved_steps": k})
    kind = measure.kind if isinstance(measure, HybridMeasure) else base.label
    return HybridMeasure(slice=law, kind=f"{kind}*que",
                         Z=measure.Z if isinstance(measure, HybridMeasure) else None)


def _as_slice(measure) -> DistributionSlice:
    return measure.slice if isinstance(measure, HybridMeasure) else measure


def l1_distance(first, second) -> float:
    """sum_x |nu_A(x) - nu_B(x)| of two laws on the same slice."""
    a, b = _as_slice(first), _as_slice(second)
    if a.n != b.n:
        raise ConfigurationError(f"L1 distance between slices {a.n} and {b.n}")
    _, (ma, mb) = align(a, b)
    return float(np.abs(ma - mb).sum())


def qlclt_error(quenched: DistributionSlice, annealed: DistributionSlice, psi: PrefactorSlice) -> float:
    """sum_x |P_omega(X_n = x) - P(X_n = x) psi(x, n)|."""
    q = _on_psi_grid(quenched, psi)
    a = _on_psi_grid(annealed, psi)
    return float(np.abs(q - a * psi.values).sum())


def lclt_error(annealed: DistributionSlice, reference: GaussianReference,
               center: Optional[Sequence[int]] = None) -> float:
    """sum_x |P(X_n = x) - gaussian(x - center)| over the annealed law's box."""
    center = (0,) * annealed.d if center is None else tuple(center)
    coords = [c - y for c, y in zip(annealed.axis_coords(), center)]
    return float(np.abs(annealed.mass - reference.density(coords)).sum())


def box_average_deviation(law: DistributionSlice, side: int,
                          offset: Optional[Sequence[int]] = None) -> float:
    """sum_x |P(X_n = x) - average of P over the box of x|: the local smoothness of a law."""
    offset = (0,) * law.d if offset is None else tuple(offset)
    ids, dims, _ = lattice.box_index(law.lower, law.shape, side, offset)
    n_boxes = int(np.prod(dims))
    sums = lattice.box_sums(law.mass, ids, n_boxes)
    sizes = np.bincount(ids.ravel(), minlength=n_boxes)
    return float(np.abs(law.mass - (sums / np.maximum(sizes, 1))[ids]).sum())


@dataclass(frozen=True)
class Sigma2Estimate:
    sigma2: float
    per_axis: Tuple[float, ...]
    isotropy: float
    r_squared: Tuple[float, ...]


def estimate_sigma2(laws: Sequence[DistributionSlice], start_time: int = 0) -> Sigma2Estimate:
    """
    Least-squares slope of the per-axis variance against elapsed time.

    ``isotropy`` is the largest relative deviation of an axis slope from
    their mean.
    """
    if len({law.n for law in laws}) < 2:
        raise ConfigurationError("sigma2 needs laws at two or more distinct times")
    d = laws[0].d
    times = np.array([law.n - start_time for law in laws], dtype=np.float64)
    variances = np.empty((len(laws), d))
    for i, law in enumerate(laws):
        total = law.mass.sum()
        for axis, coords in enumerate(law.axis_coords()):
            marginal = law.mass.sum(axis=tuple(a for a in range(d) if a != axis)) / total
            mean = float(np.dot(marginal, coords))
            variances[i, axis] = float(np.dot(marginal, (coords - mean) ** 2))
    fits = [stats.linregress(times, variances[:, axis]) for axis in range(d)]
    slopes = tuple(float(f.slope) for f in fits)
    sigma2 = float(np.mean(slopes))
    isotropy = float(max(abs(s - sigma2) for s in slopes) / sigma2) if sigma2 > 0 else float("nan")
    return Sigma2Estimate(sigma2=sigma2, per_axis=slopes, isotropy=isotropy,
                          r_squared=tuple(float(f.rvalue ** 2) for f in fits))


# ======================================================================
# HYBRID LIMITS
# ======================================================================

def hybrid_scales(n: int, eps: float, delta: float) -> Tuple[int, int]:
    """(k, l) = (ceil(n^eps), ceil(n^delta)), with 0 < 2 delta < eps < 1/4."""
    if not 0 < 2 * delta < eps < 0.25:
        raise ConfigurationError(f"need 0 < 2*delta < eps < 1/4, got eps={eps}, delta={delta}")
    return math.ceil(n ** eps), math.ceil(n ** delta)


@dataclass(frozen=True)
class HybridDecomposition:
    """The three hybrid limits and the terms bounding the quenched local limit error."""

    n: int
    k: int
    box_side: int
    L1: float
    L2: float
    L3: float
    Z: float
    qlclt: float
    degenerate_boxes: int

    @property
    def normaliser_term(self) -> float:
        """sum_x |nu_ann_x_pre - P psi| = |1/Z - 1| Z."""
        return abs(1.0 / self.Z - 1.0) * self.Z

    def terms(self) -> Dict[str, float]:
        return {"L1": self.L1, "L2": self.L2, "L3": self.L3, "normaliser": self.normaliser_term}

    def bound(self) -> float:
        return self.L1 + self.L2 + self.L3 + self.normaliser_term


def hybrid_decomposition(field: BackboneField, n: int, eps: float, delta: float,
                         annealed: Mapping[int, DistributionSlice], N_max: int,
                         start: Tuple[Sequence[int], int] = None) -> HybridDecomposition:
    """
    All hybrid comparisons at time n for a walk from ``start`` (default (0, 0)).

    ``annealed`` maps times n and n - k to annealed laws from the same
    start; the prefactor is the Cesaro average of depth ``N_max``.
    """
    k, side = hybrid_scales(n, eps, delta)
    start = ((0,) * field.d, 0) if start is None else start
    y, m = start
    t_mid, t_end = m + n - k, m + n
    for t in (t_mid, t_end):
        if t not in annealed:
            raise ConfigurationError(f"annealed law at time {t} missing")
    psi_end = cesaro_prefactor(field, t_end, N_max)
    psi_mid = cesaro_prefactor(field, t_mid, N_max)
    que_mid = propagate_quenched(field, start, n - k)
    que_end = propagate_quenched(field, start, n)

    ann_pre_end, Z = ann_times_pre(annealed[t_end], psi_end)
    ann_pre_mid, _ = ann_times_pre(annealed[t_mid], psi_mid)
    box_mid = box_que_times_pre(que_mid, psi_mid, side)
    conv_ann = convolve(ann_pre_mid, k, field)
    conv_box = convolve(box_mid, k, field)
    conv_que = convolve(que_mid, k, field)

    identity_gap = l1_distance(conv_que, que_end)
    if identity_gap > Tolerance.EXACT * 10:
        logger.warning("convolution identity gap", extra={"gap": identity_gap, "n": n})

    return HybridDecomposition(
        n=n, k=k, box_side=side,
        L1=l1_distance(ann_pre_end, conv_ann),
        L2=l1_distance(conv_ann, conv_box),
        L3=l1_distance(conv_box, que_end),
        Z=Z,
        qlclt=qlclt_error(que_end, annealed[t_end], psi_end),
        degenerate_boxes=box_mid.degenerate_boxes,
    )


def hybrid_limits(field: BackboneField, n: int, eps: float, delta: float,
                  annealed: Mapping[int, DistributionSlice], N_max: int) -> Tuple[float, float, float]:
    """(L1, L2, L3) at time n from (0, 0)."""
    result = hybrid_decomposition(field, n, eps, delta, annealed, N_max)
    return result.L1, result.L2, result.L3


def decomposition_terms(field: BackboneField, n: int, eps: float, delta: float,
                        annealed: Mapping[int, DistributionSlice], N_max: int) -> Dict[str, float]:
    """The four terms whose sum bounds qlclt_error, plus the error itself."""
    result = hybrid_decomposition(field, n, eps, delta, annealed, N_max)
    return {**result.terms(), "qlclt": result.qlclt, "bound": result.bound()}
