import numpy as np
import pytest

from conftest import as_dense, enumerate_paths, make_field, trinomial
from opwalk.services.walk import (
    AnnealedCache,
    WalkModel,
    dependency_cone,
    escape_probability,
    estimate_annealed,
    estimate_annealed_series,
    hitting_curve,
    hitting_tail,
    kernel_rows,
    paired_annealed_difference,
    plan_window,
    propagate_history,
    propagate_mass,
    propagate_quenched,
    sample_field,
    sample_path,
    sample_paths,
    step_distribution,
    support_cone,
)
from opwalk.services.measures import l1_distance
from opwalk.utils.errors import CapacityError, GeometryError, RangeError


@pytest.mark.parametrize("fixture", ["open_field_1d", "closed_field_1d"])
def test_two_steps_on_degenerate_fields(fixture, request):
    field = request.getfixturevalue(fixture)
    law = propagate_quenched(field, ((0,), 0), 2)
    values = [law.value((x,)) for x in range(-2, 3)]
    np.testing.assert_allclose(values, np.array([1, 2, 3, 2, 1]) / 9.0, atol=1e-15)
    assert law.n == 2


def test_degenerate_fields_give_trinomial_law(open_field_1d):
    law = propagate_quenched(open_field_1d, ((0,), 3), 8)
    np.testing.assert_allclose(as_dense(law, (-8,), (17,)), trinomial(8), atol=1e-14)


@pytest.mark.parametrize("start, n_steps", [(((0,), 0), 6), (((2,), 10), 5)])
def test_law_matches_path_enumeration(random_field_1d, start, n_steps):
    law = propagate_quenched(random_field_1d, start, n_steps)
    oracle = enumerate_paths(random_field_1d, start, n_steps)
    assert set(oracle) == {tuple(r) for r in law.to_frame()[["x1"]].itertuples(index=False)}
    for site, q in oracle.items():
        assert law.value(site) == pytest.approx(q, abs=1e-14)


def test_step_distribution_rows(random_field_2d):
    field = random_field_2d
    rows = kernel_rows(field, 4)
    for x in [(0, 0), (1, -2), (-3, 3)]:
        row = step_distribution(field, (x, 4))
        assert row.probabilities.sum() == pytest.approx(1.0)
        assert len(row.offsets) == 9
        np.testing.assert_allclose(rows[field.env.site_index(x)], row.probabilities)
        if field.bit(x, 4):
            for off, q in row.as_dict().items():
                z = tuple(c + o for c, o in zip(x, off))
                assert (q > 0) == bool(field.bit(z, 5))
        else:
            assert np.all(row.probabilities == 1 / 9)


def test_mass_is_conserved_in_2d(random_field_2d):
    law = propagate_quenched(random_field_2d, ((0, 0), 0), 10)
    assert law.total() == pytest.approx(1.0, abs=1e-12)
    assert np.all(law.mass >= 0)


def test_chapman_kolmogorov(random_field_1d):
    field = random_field_1d
    direct = propagate_quenched(field, ((1,), 2), 9)
    middle = propagate_quenched(field, ((1,), 2), 4)
    two_stage = propagate_mass(field, middle.mass, 6, 5)
    np.testing.assert_allclose(two_stage, direct.mass, atol=1e-14)


def test_history_ends_at_final_law(random_field_1d):
    history = propagate_history(random_field_1d, ((0,), 0), 7)
    assert [h.n for h in history] == list(range(8))
    np.testing.assert_allclose(history[-1].mass, propagate_quenched(random_field_1d, ((0,), 0), 7).mass)


def test_periodic_walk_wraps_and_conserves_mass(periodic_field_1d):
    law = propagate_quenched(periodic_field_1d, ((0,), 0), 40)
    assert law.total() == pytest.approx(1.0, abs=1e-12)
    assert law.shape == periodic_field_1d.env.shape


def test_walk_reaching_window_edge_raises():
    field = make_field(1, 3, (0, 10), 0.0)
    with pytest.raises(GeometryError):
        propagate_quenched(field, ((0,), 0), 5)


def test_walk_past_horizon_raises(random_field_1d):
    with pytest.raises(GeometryError):
        propagate_quenched(random_field_1d, ((0,), 55), 10)
    with pytest.raises(RangeError):
        propagate_quenched(random_field_1d, ((0,), 0), -1)


def test_support_cone_matches_positive_mass(random_field_1d):
    law = propagate_quenched(random_field_1d, ((0,), 3), 8)
    assert np.array_equal(support_cone(random_field_1d, ((0,), 3), 8), law.mass > 0)


def test_sampled_paths_follow_the_quenched_law(random_field_1d):
    rng = np.random.default_rng(2)
    paths = sample_paths(random_field_1d, ((0,), 0), 6, 4000, rng)
    assert paths.shape == (4000, 7, 1)
    assert np.all(np.abs(np.diff(paths[:, :, 0], axis=1)) <= 1)
    law = propagate_quenched(random_field_1d, ((0,), 0), 6)
    ends, counts = np.unique(paths[:, -1, 0], return_counts=True)
    for x, count in zip(ends, counts):
        q = law.value((int(x),))
        assert q > 0
        assert abs(count / 4000 - q) <= 4 * np.sqrt(q * (1 - q) / 4000) + 1e-3


def test_escape_probability(closed_field_1d):
    assert escape_probability(closed_field_1d, ((0,), 0), 3, 3) == 0.0
    assert escape_probability(closed_field_1d, ((0,), 0), 1, 0) == pytest.approx(2 / 3)


# ----------------------------------------------------------------------
# annealed laws
# ----------------------------------------------------------------------

def test_exact_annealed_is_symmetric_and_normalised():
    law = estimate_annealed(WalkModel(d=1, p=0.5), ((0,), 0), 3, mode="exact")
    assert law.total() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(law.mass, law.mass[::-1], atol=1e-14)
    assert law.provenance["sites"] == int(dependency_cone(1, 3).sum())


def test_exact_annealed_at_p_one_is_trinomial():
    law = estimate_annealed(WalkModel(d=1, p=1.0), ((0,), 0), 3, mode="exact")
    np.testing.assert_allclose(as_dense(law, (-3,), (7,)), trinomial(3), atol=1e-14)


def test_exact_annealed_capacity():
    with pytest.raises(CapacityError):
        estimate_annealed(WalkModel(d=1, p=0.5), ((0,), 0), 5, mode="exact")


@pytest.mark.parametrize("d", [1, 2])
@pytest.mark.parametrize("p", [0.0, 1.0])
def test_exact_annealed_on_degenerate_environments_matches_quenched(p, d):
    start = ((0,) * d, 0)
    annealed = estimate_annealed(WalkModel(d=d, p=p), start, 20, mode="exact")
    quenched = propagate_quenched(make_field(d, 24, (0, 40), p), start, 20)
    assert annealed.provenance["sites"] > 24
    assert annealed.total() == pytest.approx(1.0, abs=1e-12)
    assert l1_distance(quenched, annealed) == pytest.approx(0.0, abs=1e-10)


def test_monte_carlo_agrees_with_exact_enumeration():
    model = WalkModel(d=1, p=0.6, horizon_margin=0)
    exact = estimate_annealed(model, ((0,), 0), 3, mode="exact")
    mc = estimate_annealed(model, ((0,), 0), 3, mode="mc", reps=4000, base_seed=17)
    reference = as_dense(exact, mc.lower, mc.shape)
    assert np.all(np.abs(mc.mass - reference) <= 4 * mc.stderr + 1e-3)


def test_relative_anchoring_translates_exactly():
    model = WalkModel(d=1, p=0.7)
    origin = estimate_annealed(model, ((0,), 0), 5, reps=30, base_seed=4)
    moved = estimate_annealed(model, ((3,), 2), 5, reps=30, base_seed=4)
    assert moved.n == origin.n + 2
    assert moved.lower == (origin.lower[0] + 3,)
    np.testing.assert_array_equal(moved.mass, origin.mass)


def test_series_shares_fields_and_conserves_mass():
    model = WalkModel(d=1, p=0.7)
    series = estimate_annealed_series(model, [4, 2, 8], reps=40, base_seed=1)
    assert sorted(series) == [2, 4, 8]
    plan = plan_window(model, None, 8)
    for n, law in series.items():
        assert law.total() == pytest.approx(1.0, abs=1e-9)
        assert law.lower == plan.lower


def test_thread_count_does_not_change_estimates():
    model = WalkModel(d=1, p=0.7)
    one = estimate_annealed(model, ((0,), 0), 4, reps=20, base_seed=3, threads=1)
    two = estimate_annealed(model, ((0,), 0), 4, reps=20, base_seed=3, threads=2)
    np.testing.assert_allclose(one.mass, two.mass, atol=1e-15)


def test_paired_difference_of_identical_targets_is_zero():
    model = WalkModel(d=1, p=0.7)
    target = (((0,), 0), 4)
    diff = paired_annealed_difference(model, target, target, reps=20)
    assert diff.sup() == 0.0
    assert np.all(diff.stderr == 0.0)


def test_annealed_cache_hits_return_cold_arrays(tmp_path):
    cache = AnnealedCache(tmp_path / "annealed")
    model = WalkModel(d=1, p=0.7)
    cold = cache.get(model, 4, reps=25, base_seed=6)
    warm = cache.get(model, 4, reps=25, base_seed=6)
    np.testing.assert_array_equal(cold.mass, warm.mass)
    direct = estimate_annealed_series(model, [4], reps=25, base_seed=6)[4]
    np.testing.assert_array_equal(cold.mass, direct.mass)
    moved = cache.get(model, 4, reps=25, base_seed=6, start=((2,), 1))
    assert moved.n == 5 and moved.lower == (cold.lower[0] + 2,)


def test_sample_field_honours_plan():
    model = WalkModel(d=2, p=0.7, horizon_margin=3, spatial_margin=2)
    plan = plan_window(model, ((1, 1), 4), 5, lookback=2)
    field = sample_field(model, 9, plan)
    assert field.horizon == 12
    assert field.env.time_range == (2, 12)
    assert field.env.center == (1, 1)
    assert field.env.spatial_extents == (10, 10)


@pytest.mark.parametrize("p, expected", [(0.0, [1.0, 1.0, 1.0]), (1.0, [1.0, 0.0, 0.0])])
def test_hitting_curve_on_degenerate_fields(p, expected):
    curve = hitting_curve(WalkModel(d=1, p=p), [0, 1, 5], reps=5)
    np.testing.assert_allclose(curve["value"], expected)


def test_hitting_tail_decreases():
    model = WalkModel(d=1, p=0.6)
    short = hitting_tail(model, 2, reps=40, base_seed=2)
    long = hitting_tail(model, 10, reps=40, base_seed=2)
    assert long.value <= short.value


def test_single_path_stays_on_the_backbone(random_field_1d):
    path = sample_path(random_field_1d, ((0,), 0), 10, np.random.default_rng(4))
    assert path.shape == (11, 1)
    for t in range(1, 11):
        assert random_field_1d.bit(tuple(path[t]), t)


class _EdgeDraws:
    """Uniform draws pinned just below one."""

    def random(self, count):
        return np.full(count, np.nextafter(1.0, 0.0))


@pytest.mark.parametrize("d", [1, 2])
def test_sampled_paths_take_the_last_offset_for_draws_near_one(d):
    field = make_field(d, 12, (0, 20), 0.0)
    paths = sample_paths(field, ((0,) * d, 0), 8, 5, _EdgeDraws())
    steps = np.diff(paths, axis=1)
    assert np.all(steps == 1)


@pytest.mark.slow
@pytest.mark.parametrize("d, extent", [(1, 12), (2, 10)])
def test_law_matches_path_enumeration_on_many_fields(d, extent):
    for seed in range(50):
        n_steps = 1 + seed % 8
        field = make_field(d, extent, (0, 16), 0.7, seed=100 + seed)
        start = ((0,) * d, seed % 4)
        law = propagate_quenched(field, start, n_steps)
        oracle = enumerate_paths(field, start, n_steps)
        assert law.total() == pytest.approx(1.0, abs=1e-12)
        for site, q in oracle.items():
            assert law.value(site) == pytest.approx(q, abs=1e-12)


@pytest.mark.slow
def test_monte_carlo_agrees_with_exact_enumeration_at_scale():
    model = WalkModel(d=1, p=0.7, horizon_margin=0)
    exact = estimate_annealed(model, ((0,), 0), 3, mode="exact")
    mc = estimate_annealed(model, ((0,), 0), 3, mode="mc", reps=100_000, base_seed=29)
    reference = as_dense(exact, mc.lower, mc.shape)
    assert np.all(np.abs(mc.mass - reference) <= 4 * mc.stderr + 1e-12)


@pytest.mark.slow
def test_monte_carlo_agrees_with_exact_enumeration_in_2d():
    model = WalkModel(d=2, p=0.7, horizon_margin=0)
    exact = estimate_annealed(model, ((0, 0), 0), 1, mode="exact")
    assert exact.provenance["sites"] == 10
    mc = estimate_annealed(model, ((0, 0), 0), 1, mode="mc", reps=20_000, base_seed=31)
    reference = as_dense(exact, mc.lower, mc.shape)
    assert np.all(np.abs(mc.mass - reference) <= 4 * mc.stderr + 1e-12)
