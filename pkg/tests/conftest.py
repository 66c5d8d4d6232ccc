"""Shared fixtures: small seeded windows, degenerate fields and enumeration oracles."""

from collections import defaultdict
from typing import Dict, Tuple

import numpy as np
import pytest

from opwalk.services.cluster import BackboneField, compute_backbone
from opwalk.services.environment import from_bits, sample_environment
from opwalk.services.walk import DistributionSlice, step_distribution


def make_field(d: int, extent: int, time_range: Tuple[int, int], p: float, seed: int = 7,
               boundary_mode: str = "open", horizon: int = None) -> BackboneField:
    env = sample_environment(d, extent, time_range, p, seed, boundary_mode=boundary_mode)
    return compute_backbone(env, time_range[1] if horizon is None else horizon)


def field_from_bits(occupancy, time_range: Tuple[int, int], boundary_mode: str = "open") -> BackboneField:
    env = from_bits(np.asarray(occupancy, dtype=bool), time_range, boundary_mode=boundary_mode)
    return compute_backbone(env, time_range[1])


def enumerate_paths(field: BackboneField, start, n_steps: int) -> Dict[Tuple[int, ...], float]:
    """Law of X_{m+n} by summing the probabilities of every path, one kernel row at a time."""
    x, m = start
    law = {tuple(x): 1.0}
    for t in range(m, m + n_steps):
        nxt = defaultdict(float)
        for site, weight in law.items():
            row = step_distribution(field, (site, t))
            for offset, q in row.as_dict().items():
                if q > 0:
                    nxt[tuple(c + o for c, o in zip(site, offset))] += weight * q
        law = dict(nxt)
    return law


def trinomial(n: int) -> np.ndarray:
    """Law of a sum of n uniform {-1, 0, 1} steps on -n..n."""
    law = np.array([1.0])
    for _ in range(n):
        law = np.convolve(law, np.ones(3) / 3.0)
    return law


def as_dense(law: DistributionSlice, lower, shape) -> np.ndarray:
    return law.reindexed(lower, shape).mass


@pytest.fixture
def open_field_1d():
    """d = 1, p = 1: every site is on the backbone."""
    return make_field(1, 20, (0, 30), 1.0)


@pytest.fixture
def closed_field_1d():
    """d = 1, p = 0: no backbone, every step is uniform."""
    return make_field(1, 20, (0, 30), 0.0)


@pytest.fixture
def random_field_1d():
    return make_field(1, 30, (0, 60), 0.7, seed=11)


@pytest.fixture
def random_field_2d():
    return make_field(2, 12, (0, 40), 0.7, seed=5)


@pytest.fixture
def periodic_field_1d():
    return make_field(1, 15, (-12, 40), 0.7, seed=3, boundary_mode="periodic")


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Every test gets its own annealed cache directory."""
    monkeypatch.setenv("OPWALK_CACHE", str(tmp_path / "cache"))
