"""
Prefactor fields: the density of the environment seen from the particle.

``psi_N(x, n) = sum_y P_omega^(y, n-N)(X_n = x)`` is obtained by pushing the
constant field 1 from slice n - N forward N steps. Cesaro averages over N
approximate the invariant density; the diagnostics below check harmonicity,
box concentration, invariance under the point-of-view kernel and
stability of the construction.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from opwalk.services import lattice
from opwalk.services.cluster import BackboneField, compute_backbone
from opwalk.services.environment import SpaceTimePoint
from opwalk.services.walk import (
    DistributionSlice,
    KernelRow,
    as_start,
    embed,
    iterate_push,
    kernel_rows,
    propagate_mass,
)
from opwalk.utils.errors import ConfigurationError, GeometryError, RangeError
from opwalk.utils.logging import get_logger
from opwalk.utils.stats import Estimate, mean_estimate

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class PrefactorSlice:
    """psi on one slice, over the box of sites where it is exact."""

    n: int
    N: int
    lower: tuple
    values: np.ndarray
    horizon: int
    boundary_mode: str
    kind: str = "single"

    @property
    def shape(self):
        return self.values.shape

    def mean(self) -> float:
        return float(self.values.mean())

    def value(self, x) -> float:
        index = tuple(int(c) - lo for c, lo in zip(x, self.lower))
        return float(self.values[index])

    def to_frame(self) -> pd.DataFrame:
        grids = np.meshgrid(*[np.arange(lo, lo + s) for lo, s in zip(self.lower, self.shape)], indexing="ij")
        frame = pd.DataFrame({f"x{i + 1}": g.ravel() for i, g in enumerate(grids)})
        frame["value"] = self.values.ravel()
        return frame

    def metadata(self) -> Dict[str, object]:
        return {"n": self.n, "N": self.N, "horizon": self.horizon,
                "boundary": self.boundary_mode, "kind": self.kind, "lower": list(self.lower)}


def _cropped(field: BackboneField, values: np.ndarray, width: int, n: int, N: int, kind: str) -> PrefactorSlice:
    env = field.env
    if field.periodic or width == 0:
        return PrefactorSlice(n=n, N=N, lower=env.lower, values=values, horizon=field.horizon,
                              boundary_mode=env.boundary_mode, kind=kind)
    if any(s <= 2 * width for s in env.shape):
        raise GeometryError(f"window {env.shape} too small for prefactor depth {width}")
    core = tuple(slice(width, s - width) for s in env.shape)
    return PrefactorSlice(n=n, N=N, lower=tuple(lo + width for lo in env.lower), values=values[core],
                          horizon=field.horizon, boundary_mode=env.boundary_mode, kind=kind)


def _check_lookback(field: BackboneField, n: int, N: int) -> None:
    if N < 0:
        raise ConfigurationError(f"prefactor depth must be non-negative, got {N}")
    if n - N < field.t_lo or n > field.horizon:
        raise GeometryError(f"prefactor at n={n} with depth {N} needs slices [{n - N}, {n}] "
                            f"inside [{field.t_lo}, {field.horizon}]", hint="enlarge the window backwards in time")


def compute_prefactor(field: BackboneField, n: int, N: int) -> PrefactorSlice:
    """
    psi_N(., n) by forward recursion from psi_0 = 1 at slice n - N.

    Mass may leave an open window; the result is cropped to sites at
    distance >= N from the edge, where every start y lies inside the window.
    """
    _check_lookback(field, n, N)
    values = np.ones(field.env.shape)
    for _, values in iterate_push(field, values, n - N, N, leak=True):
        pass
    return _cropped(field, values, N, n, N, "single")


def pov_weights(field: BackboneField, at) -> KernelRow:
    """
    Point-of-view kernel g out of (x, n).

    g(y) = xi_{n+1}(x+y) / sum_z xi_{n+1}(x+z) when omega(x, n) = 1 and the sum
    is positive, uniform 3^-d otherwise.
    """
    x, n = as_start(at, field.d)
    if not field.t_lo <= n < field.horizon:
        raise RangeError(f"kernel at time {n} needs slice {n + 1} <= horizon {field.horizon}")
    env = field.env
    offsets = tuple(lattice.offsets(field.d))
    above = field.slice(n + 1)
    neighbours = np.array([above[env.site_index(tuple(c + o for c, o in zip(x, off)))]
                           if env.contains_site(tuple(c + o for c, o in zip(x, off))) else 0
                           for off in offsets], dtype=np.float64)
    total = neighbours.sum()
    open_origin = env.slice_bits(n)[env.site_index(x)]
    weights = neighbours / total if open_origin and total > 0 else np.full(len(offsets), 3.0 ** -field.d)
    return KernelRow(origin=SpaceTimePoint(x, n), offsets=offsets, probabilities=weights)


def _gather(rows: np.ndarray, values: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """sum_y rows[y][x - y] * values[y]: the kernel's column sums weighted by values."""
    out = np.zeros(values.shape)
    for j, off in enumerate(lattice.offsets(d)):
        out += lattice.shifted(rows[..., j] * values, tuple(-o for o in off), d, periodic)
    return out


def check_harmonicity(field: BackboneField, n: int, N: int) -> float:
    """
    max_x |psi_N(x, n) - sum_y K((y, n-1), x) psi_{N-1}(y, n-1)|.

    Both prefactor slices are built independently; the transport uses the
    kernel rows, not the push-forward.
    """
    if N < 1:
        raise ConfigurationError("harmonicity needs depth N >= 1")
    current = compute_prefactor(field, n, N)
    previous = compute_prefactor(field, n - 1, N - 1)
    env = field.env
    full = embed(previous.values, previous.lower, env.lower, env.shape, strict=False)
    transported = _gather(kernel_rows(field, n - 1), full, field.d, field.periodic)
    predicted = embed(transported, env.lower, current.lower, current.shape, strict=False)
    residual = float(np.max(np.abs(current.values - predicted)))
    logger.debug("harmonicity residual", extra={"n": n, "N": N, "residual": residual})
    return residual


@dataclass(frozen=True)
class BoxConcentration:
    """Deviation |box average - 1| of psi on each complete box."""

    side: int
    deviations: np.ndarray
    threshold: float

    @property
    def exceedance(self) -> float:
        if self.deviations.size == 0:
            return float("nan")
        return float(np.mean(self.deviations > self.threshold))


def box_concentration(psi: PrefactorSlice, side: int, threshold: float = 0.25) -> BoxConcentration:
    """Per-box deviations over the complete boxes of side ``side`` tiling psi's box."""
    if side < 1:
        raise ConfigurationError(f"box side must be positive, got {side}")
    deviations = []
    for _, box in lattice.iter_boxes(psi.lower, psi.shape, side, psi.lower):
        if all(s.stop - s.start == side for s in box):
            deviations.append(abs(float(psi.values[box].mean()) - 1.0))
    return BoxConcentration(side=side, deviations=np.array(deviations), threshold=threshold)


def cesaro_prefactor(field: BackboneField, n: int, N_max: int) -> PrefactorSlice:
    """
    (1 / N_max) * sum_{N < N_max} psi_N(., n).

    Uses S_{t+1} = 1 + push(S_t) started from S = 1 at slice n - N_max + 1,
    so all depths are accumulated in N_max - 1 pushes.
    """
    if N_max < 1:
        raise ConfigurationError("N_max must be at least 1")
    _check_lookback(field, n, N_max - 1)
    total = np.ones(field.env.shape)
    t = n - N_max + 1
    while t < n:
        total = 1.0 + propagate_mass(field, total, t, 1, leak=True)
        t += 1
    return _cropped(field, total / N_max, N_max - 1, n, N_max, "cesaro")


def prefactor_moments(psi: PrefactorSlice, k_max: int = 4) -> pd.Series:
    """Empirical k-th moments of psi over the slice, k = 1..k_max."""
    values = psi.values.ravel()
    return pd.Series([float(np.mean(values ** k)) for k in range(1, k_max + 1)],
                     index=pd.RangeIndex(1, k_max + 1, name="k"), name="moment")


# ======================================================================
# INVARIANCE
# ======================================================================

@dataclass(frozen=True)
class PatchFunctional:
    """
    A bounded local functional of the backbone seen from a site.

    ``evaluate(xi_slice, d, periodic)`` returns its value at every site of
    the slice; ``radius`` is the patch radius it reads.
    """

    name: str
    radius: int
    evaluate: Callable[[np.ndarray, int, bool], np.ndarray] = field(repr=False)


def constant_one() -> PatchFunctional:
    return PatchFunctional("one", 0, lambda xi, d, periodic: np.ones(xi.shape))


def xi_bit() -> PatchFunctional:
    return PatchFunctional("xi_bit", 0, lambda xi, d, periodic: xi.astype(np.float64))


def patch_density(radius: int) -> PatchFunctional:
    """Fraction of backbone sites in the sup-norm patch of given radius."""
    size = 2 * radius + 1

    def evaluate(xi, d, periodic):
        return ndimage.uniform_filter(xi.astype(np.float64), size=size,
                                      mode="wrap" if periodic else "constant")

    return PatchFunctional(f"patch_density_{radius}", radius, evaluate)


def patch_functional(name: str, radius: int = 1) -> PatchFunctional:
    """Functional by name: ``one``, ``xi_bit`` or ``patch_density``."""
    factories = {"one": constant_one, "xi_bit": xi_bit, "patch_density": lambda: patch_density(radius)}
    if name not in factories:
        raise ConfigurationError(f"unknown test function {name!r}; expected one of {sorted(factories)}")
    return factories[name]()


def invariance_terms(field: BackboneField, functional: PatchFunctional, n: int, N: int) -> float:
    """Spatial average of psi_N * (Nf - f) at slice n over sites where all terms are exact."""
    psi = compute_prefactor(field, n, N)
    env = field.env
    f_now = functional.evaluate(field.slice(n), field.d, field.periodic)
    f_next = functional.evaluate(field.slice(n + 1), field.d, field.periodic)
    rows = kernel_rows(field, n)
    transported = np.zeros(env.shape)
    for j, off in enumerate(lattice.offsets(field.d)):
        transported += rows[..., j] * lattice.shifted(f_next, off, field.d, field.periodic)
    integrand = embed(psi.values, psi.lower, env.lower, env.shape, strict=False) * (transported - f_now)
    margin = 0 if field.periodic else max(N, functional.radius + 1)
    if any(s <= 2 * margin for s in env.shape):
        raise GeometryError(f"window {env.shape} too small for invariance margin {margin}")
    core = tuple(slice(margin, s - margin) for s in env.shape)
    return float(integrand[core].mean())


def invariance_gap(fields: Sequence[BackboneField], functional: PatchFunctional, n: int, N: int) -> Estimate:
    """|E[psi_N (Nf - f)]| over an ensemble of fields, with its standard error."""
    terms = [invariance_terms(f, functional, n, N) for f in fields]
    est = mean_estimate(terms)
    return Estimate(abs(est.value), est.stderr, est.samples)


# ======================================================================
# UNIQUENESS
# ======================================================================

@dataclass(frozen=True)
class CesaroSpec:
    """A Cesaro construction: averaging depth and backbone horizon (None = the field's)."""

    N_max: int
    horizon: Optional[int] = None


def build_cesaro(field: BackboneField, spec: CesaroSpec, n: int) -> PrefactorSlice:
    if spec.horizon is not None and spec.horizon != field.horizon:
        field = compute_backbone(field.env, spec.horizon)
    return cesaro_prefactor(field, n, spec.N_max)


def uniqueness_probe(field: BackboneField, first: CesaroSpec, second: CesaroSpec, n: int,
                     annealed: DistributionSlice) -> float:
    """sum_x P(X_n = x) |psi_A(x, n) - psi_B(x, n)| for two Cesaro constructions."""
    psi_a = build_cesaro(field, first, n)
    psi_b = build_cesaro(field, second, n)
    lower = tuple(max(a, b) for a, b in zip(psi_a.lower, psi_b.lower))
    upper = tuple(min(a + sa, b + sb) for a, sa, b, sb in zip(psi_a.lower, psi_a.shape, psi_b.lower, psi_b.shape))
    shape = tuple(u - lo for u, lo in zip(upper, lower))
    gap = np.abs(embed(psi_a.values, psi_a.lower, lower, shape, strict=False)
                 - embed(psi_b.values, psi_b.lower, lower, shape, strict=False))
    weights = embed(annealed.mass, annealed.lower, lower, shape)
    return float(np.sum(weights * gap))
