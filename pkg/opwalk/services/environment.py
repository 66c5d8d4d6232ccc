"""
Finite windows of the i.i.d. Bernoulli space-time field.

A site (x, n) is open with probability p. Bits are not drawn sequentially:
each one is a counter-based hash of (seed, n, x), so any window (shifted,
partial or enlarged) of the same seed reads the same bits on its overlap.
Windows store one bit per site, packed per time slice.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from opwalk.utils.errors import ConfigurationError, RangeError
from opwalk.utils.io import (
    ENVIRONMENT_MAGIC,
    FieldHeader,
    read_field_dump,
    read_sparse_text,
    write_field_dump,
    write_sparse_text,
)
from opwalk.utils.logging import get_logger

logger = get_logger(__name__)

BOUNDARY_MODES = ("open", "periodic")

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 2.0 ** -53


# ======================================================================
# COUNTER-BASED BITS
# ======================================================================

def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _as_u64(values) -> np.ndarray:
    """Reinterpret integers modulo 2^64; seeds may exceed the int64 range."""
    if isinstance(values, (int, np.integer)):
        return np.uint64(int(values) & 0xFFFFFFFFFFFFFFFF)
    array = np.asarray(values)
    if array.dtype.kind == "u":
        return array.astype(np.uint64)
    return array.astype(np.int64).astype(np.uint64)


def site_uniforms(seed, times: np.ndarray, coords: Sequence[np.ndarray]) -> np.ndarray:
    """
    Uniform [0, 1) variates keyed by (seed, time, x_1, ..., x_d).

    All arguments broadcast against each other, so ``seed`` may carry a
    leading batch axis for many environments at once.
    """
    with np.errstate(over="ignore"):
        h = _splitmix64(_as_u64(seed))
        h = _splitmix64(h ^ _as_u64(times))
        for axis_coords in coords:
            h = _splitmix64(h ^ _as_u64(axis_coords))
    return (h >> np.uint64(11)).astype(np.float64) * _TO_UNIT


def derive_seed(base_seed: int, index: int) -> int:
    """Seed of the index-th environment of a run (independent streams)."""
    state = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(state.generate_state(1, dtype=np.uint64)[0])


# ======================================================================
# DOMAIN TYPES
# ======================================================================

@dataclass(frozen=True)
class SpaceTimePoint:
    """A space-time site (x, n)."""

    x: Tuple[int, ...]
    n: int

    @classmethod
    def of(cls, x: Union[int, Sequence[int]], n: int) -> "SpaceTimePoint":
        coords = (int(x),) if np.isscalar(x) else tuple(int(c) for c in x)
        return cls(coords, int(n))


@dataclass(frozen=True, eq=False)
class EnvironmentWindow:
    """
    A seeded finite space-time slab of the Bernoulli field.

    Spatial axis i covers ``center[i] - spatial_extents[i] .. center[i] + spatial_extents[i]``,
    time covers ``time_range[0] .. time_range[1]`` inclusive. Under periodic
    boundaries the spatial axes (never time) wrap.
    """

    d: int
    spatial_extents: Tuple[int, ...]
    time_range: Tuple[int, int]
    p: float
    seed: int
    boundary_mode: str
    packed: np.ndarray = field(repr=False)
    center: Tuple[int, ...] = ()

    # ------------------------------------------------------------------
    # geometry
    # ------------------------------------------------------------------

    @property
    def periodic(self) -> bool:
        return self.boundary_mode == "periodic"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Spatial grid shape."""
        return tuple(2 * e + 1 for e in self.spatial_extents)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_times(self) -> int:
        return self.time_range[1] - self.time_range[0] + 1

    @property
    def volume(self) -> int:
        return self.n_sites * self.n_times

    @property
    def lower(self) -> Tuple[int, ...]:
        """Smallest coordinate on each spatial axis."""
        return tuple(c - e for c, e in zip(self.center, self.spatial_extents))

    @property
    def upper(self) -> Tuple[int, ...]:
        return tuple(c + e for c, e in zip(self.center, self.spatial_extents))

    def contains_time(self, n: int) -> bool:
        return self.time_range[0] <= n <= self.time_range[1]

    def time_index(self, n: int) -> int:
        if not self.contains_time(n):
            raise RangeError(f"time {n} outside window {self.time_range}")
        return n - self.time_range[0]

    def site_index(self, x: Sequence[int]) -> Tuple[int, ...]:
        """Grid index of spatial site x after boundary resolution."""
        if len(x) != self.d:
            raise RangeError(f"site {tuple(x)} has dimension {len(x)}, window has {self.d}")
        index = []
        for coord, lo, size in zip(x, self.lower, self.shape):
            i = int(coord) - lo
            if self.periodic:
                i %= size
            elif not 0 <= i < size:
                raise RangeError(f"site {tuple(x)} outside window [{self.lower}, {self.upper}]")
            index.append(i)
        return tuple(index)

    def contains_site(self, x: Sequence[int]) -> bool:
        if self.periodic:
            return True
        return all(lo <= c <= hi for c, lo, hi in zip(x, self.lower, self.upper))

    def axis_coords(self) -> Tuple[np.ndarray, ...]:
        """Coordinates along each spatial axis."""
        return tuple(np.arange(lo, lo + size) for lo, size in zip(self.lower, self.shape))

    # ------------------------------------------------------------------
    # bits
    # ------------------------------------------------------------------

    def slice_bits(self, n: int) -> np.ndarray:
        """Occupancy of time slice n as a boolean spatial grid."""
        row = self.packed[self.time_index(n)]
        bits = np.unpackbits(row, count=self.n_sites, bitorder="little")
        return bits.astype(bool).reshape(self.shape)

    @cached_property
    def occupancy(self) -> np.ndarray:
        """Full occupancy, shape (n_times, *shape)."""
        bits = np.unpackbits(self.packed, axis=1, count=self.n_sites, bitorder="little")
        return bits.astype(bool).reshape((self.n_times,) + self.shape)

    def iter_open_sites(self) -> Iterator[Tuple[Tuple[int, ...], int]]:
        for t_index, spatial in zip(*np.nonzero(self.occupancy.reshape(self.n_times, -1))):
            grid = np.unravel_index(spatial, self.shape)
            x = tuple(int(g) + lo for g, lo in zip(grid, self.lower))
            yield x, int(t_index) + self.time_range[0]


def _pack(occupancy: np.ndarray) -> np.ndarray:
    flat = occupancy.reshape(occupancy.shape[0], -1)
    return np.packbits(flat, axis=1, bitorder="little")


def _normalise_geometry(d: int, spatial_extents, time_range, p: float,
                        boundary_mode: str, center) -> Tuple[Tuple[int, ...], Tuple[int, int], Tuple[int, ...]]:
    if d < 1:
        raise ConfigurationError(f"dimension must be positive, got {d}")
    extents = (int(spatial_extents),) * d if np.isscalar(spatial_extents) else tuple(int(e) for e in spatial_extents)
    if len(extents) != d:
        raise ConfigurationError(f"expected {d} extents, got {len(extents)}")
    if any(e <= 0 for e in extents):
        raise ConfigurationError(f"spatial extents must be positive, got {extents}")
    t_lo, t_hi = (int(t) for t in time_range)
    if t_hi < t_lo:
        raise ConfigurationError(f"empty time range [{t_lo}, {t_hi}]")
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"p must lie in [0, 1], got {p}")
    if boundary_mode not in BOUNDARY_MODES:
        raise ConfigurationError(f"boundary mode must be one of {BOUNDARY_MODES}, got {boundary_mode!r}")
    centre = (0,) * d if center is None else tuple(int(c) for c in center)
    if len(centre) != d:
        raise ConfigurationError(f"centre {centre} does not match dimension {d}")
    return extents, (t_lo, t_hi), centre


def _hash_grid(seeds, d: int, extents, time_range, center, periodic: bool):
    """Broadcastable (seed, time, coords) arguments for :func:`site_uniforms`."""
    times = np.arange(time_range[0], time_range[1] + 1)
    times = times.reshape((-1,) + (1,) * d)
    coords = []
    for axis, (c, e) in enumerate(zip(center, extents)):
        size = 2 * e + 1
        # periodic windows hash torus indices so wrapping is consistent
        axis_coords = np.arange(size) if periodic else np.arange(c - e, c + e + 1)
        view = [1] * (d + 1)
        view[axis + 1] = size
        coords.append(axis_coords.reshape(view))
    return times, coords


# ======================================================================
# OPERATIONS
# ======================================================================

def sample_environment(d: int, spatial_extents, time_range, p: float, seed: int,
                       boundary_mode: str = "open", center: Optional[Sequence[int]] = None) -> EnvironmentWindow:
    """
    Sample a window of the Bernoulli(p) field.

    Args:
        d: spatial dimension
        spatial_extents: per-axis half-width (int or sequence of d ints)
        time_range: (t_lo, t_hi), inclusive
        p: open probability
        seed: 64-bit seed; the bits are a pure function of (seed, p, geometry)
        boundary_mode: "open" or "periodic"
        center: spatial centre of the window (default origin)

    Raises:
        ConfigurationError: non-positive extent, empty time range, p outside [0, 1]
    """
    extents, trange, centre = _normalise_geometry(d, spatial_extents, time_range, p, boundary_mode, center)
    periodic = boundary_mode == "periodic"
    times, coords = _hash_grid(seed, d, extents, trange, centre, periodic)
    occupancy = site_uniforms(seed, times, coords) < p
    logger.debug("sampled environment", extra={"d": d, "extents": extents,
                                               "time_range": trange, "p": p, "seed": seed})
    return EnvironmentWindow(d=d, spatial_extents=extents, time_range=trange, p=float(p),
                             seed=int(seed), boundary_mode=boundary_mode,
                             packed=_pack(occupancy), center=centre)


def sample_batch(d: int, spatial_extents, time_range, p: float, seeds: Sequence[int],
                 boundary_mode: str = "open", center: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Occupancy of several windows sharing one geometry.

    Returns a boolean array of shape (len(seeds), n_times, *shape); entry r
    equals ``sample_environment(..., seed=seeds[r]).occupancy``.
    """
    extents, trange, centre = _normalise_geometry(d, spatial_extents, time_range, p, boundary_mode, center)
    times, coords = _hash_grid(0, d, extents, trange, centre, boundary_mode == "periodic")
    seed_axis = np.asarray([int(s) & 0xFFFFFFFFFFFFFFFF for s in seeds], dtype=np.uint64)
    seed_axis = seed_axis.reshape((-1,) + (1,) * (d + 1))
    times = times[np.newaxis]
    coords = [c[np.newaxis] for c in coords]
    return site_uniforms(seed_axis, times, coords) < p


def from_bits(occupancy: np.ndarray, time_range: Tuple[int, int], p: float = float("nan"),
              seed: int = 0, boundary_mode: str = "open",
              center: Optional[Sequence[int]] = None) -> EnvironmentWindow:
    """Window with explicitly given bits (shape (n_times, 2L_1+1, ..., 2L_d+1))."""
    occupancy = np.asarray(occupancy, dtype=bool)
    d = occupancy.ndim - 1
    if d < 1 or any(s % 2 == 0 for s in occupancy.shape[1:]):
        raise ConfigurationError(f"occupancy shape {occupancy.shape} is not (T, odd widths...)")
    extents = tuple((s - 1) // 2 for s in occupancy.shape[1:])
    if occupancy.shape[0] != time_range[1] - time_range[0] + 1:
        raise ConfigurationError(f"{occupancy.shape[0]} slices do not match time range {time_range}")
    centre = (0,) * d if center is None else tuple(int(c) for c in center)
    probability = p if np.isfinite(p) else float(occupancy.mean())
    env = EnvironmentWindow(d=d, spatial_extents=extents, time_range=tuple(time_range),
                            p=probability, seed=int(seed), boundary_mode=boundary_mode,
                            packed=_pack(occupancy), center=centre)
    if boundary_mode not in BOUNDARY_MODES:
        raise ConfigurationError(f"boundary mode must be one of {BOUNDARY_MODES}")
    return env


def shift_view(env: EnvironmentWindow, shift: Tuple[Sequence[int], int]) -> EnvironmentWindow:
    """
    The shifted environment sigma_(y,m): ``view(x, n) = env(x + y, n + m)``.

    The view shares the stored bits; composing views adds offsets.
    """
    y, m = shift
    y = (int(y),) * env.d if np.isscalar(y) else tuple(int(c) for c in y)
    if len(y) != env.d:
        raise RangeError(f"shift {y} does not match dimension {env.d}")
    return replace(env,
                   center=tuple(c - s for c, s in zip(env.center, y)),
                   time_range=(env.time_range[0] - m, env.time_range[1] - m))


def is_open(env: EnvironmentWindow, point: Tuple[Sequence[int], int]) -> int:
    """Stored bit at (x, n); RangeError outside an open window."""
    x, n = point
    x = (int(x),) if np.isscalar(x) else tuple(x)
    row = env.packed[env.time_index(n)]
    flat = int(np.ravel_multi_index(env.site_index(x), env.shape))
    return int((row[flat >> 3] >> (flat & 7)) & 1)


def export_occupancy(env: EnvironmentWindow) -> np.ndarray:
    """Bulk export of every bit, shape (n_times, *shape)."""
    return env.occupancy.copy()


# ======================================================================
# PERSISTENCE
# ======================================================================

def dump_window(env: EnvironmentWindow, path: Path) -> Path:
    header = FieldHeader(d=env.d, spatial_extents=env.spatial_extents, time_range=env.time_range,
                         p=env.p, seed=env.seed, periodic=env.periodic, center=env.center)
    return write_field_dump(path, ENVIRONMENT_MAGIC, header, env.occupancy)


def load_window(path: Path) -> EnvironmentWindow:
    magic, header, bits = read_field_dump(path)
    if magic != ENVIRONMENT_MAGIC:
        raise ConfigurationError(f"{path} is not an environment dump")
    return from_bits(bits, header.time_range, p=header.p, seed=header.seed,
                     boundary_mode="periodic" if header.periodic else "open", center=header.center)


def dump_sparse_text(env: EnvironmentWindow, path: Path) -> Path:
    """Plain-text list of open sites, for tiny windows."""
    return write_sparse_text(path, env.iter_open_sites())


def load_sparse_text(path: Path, d: int, spatial_extents, time_range, p: float = float("nan"),
                     boundary_mode: str = "open", center: Optional[Sequence[int]] = None) -> EnvironmentWindow:
    extents, trange, centre = _normalise_geometry(d, spatial_extents, time_range,
                                                  0.0 if not np.isfinite(p) else p, boundary_mode, center)
    occupancy = np.zeros((trange[1] - trange[0] + 1,) + tuple(2 * e + 1 for e in extents), dtype=bool)
    rows = read_sparse_text(path)
    for row in rows:
        x, n = row[:d], int(row[d])
        index = tuple(int(c) - cc + e for c, cc, e in zip(x, centre, extents))
        occupancy[(n - trange[0],) + index] = True
    return from_bits(occupancy, trange, p=p, boundary_mode=boundary_mode, center=centre)
