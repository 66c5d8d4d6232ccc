import numpy as np
import pytest

from conftest import field_from_bits, make_field, trinomial
from opwalk.services.experiments import (
    DERIVATIVE_TYPES,
    BoxPartition,
    annealed_box_transition,
    box_masses,
    build_coupling,
    classify_good,
    classify_social,
    derivative_estimates,
    ladder_scales,
    non_social_mass,
    pair_tv,
    partition_oscillation,
    scale_ladder,
    tv_coupling,
    tv_on_boxes,
)
from opwalk.services.walk import (
    DistributionSlice,
    WalkModel,
    estimate_annealed_series,
    plan_window,
    propagate_quenched,
    sample_field,
)
from opwalk.utils.errors import ConfigurationError


def _trinomial_slice(n: int) -> DistributionSlice:
    return DistributionSlice(n=n, lower=(-n,), mass=trinomial(n), label="annealed")


# ----------------------------------------------------------------------
# partitions and box distances
# ----------------------------------------------------------------------

def test_partition_geometry():
    partition = BoxPartition.of(2.7, 1)
    assert partition.side == 2
    assert partition.box_of((-1,)) == (-1,)
    assert partition.box_of((3,)) == (1,)
    assert partition.coarsened(3).side == 6
    np.testing.assert_array_equal(partition.sites((1,)), [[2], [3]])
    assert BoxPartition.of(3, 1).boxes_meeting(2) == [(-1,), (0,)]
    assert BoxPartition.of(0.4, 2).side == 1
    assert len(BoxPartition.of(2, 2).boxes_meeting(1)) == 4


def test_partition_rejects_bad_geometry():
    with pytest.raises(ConfigurationError):
        BoxPartition(side=0, offset=(0,), d=1)
    with pytest.raises(ConfigurationError):
        BoxPartition(side=2, offset=(0, 0), d=1)


def test_box_masses_sum_to_one():
    masses = box_masses(_trinomial_slice(5), BoxPartition.of(3, 1))
    assert masses.sum() == pytest.approx(1.0)
    assert masses.loc[0] == pytest.approx(trinomial(5)[5:8].sum())


def test_tv_on_boxes():
    law = _trinomial_slice(4)
    partition = BoxPartition.of(2, 1)
    assert tv_on_boxes(law, law, partition) == 0.0
    far = DistributionSlice(n=4, lower=(40,), mass=np.array([1.0]))
    assert tv_on_boxes(law, far, partition) == pytest.approx(2.0)
    with pytest.raises(ConfigurationError):
        tv_on_boxes(law, _trinomial_slice(3), partition)


def test_tv_on_coarser_boxes_is_smaller(random_field_1d):
    quenched = propagate_quenched(random_field_1d, ((0,), 0), 12)
    reference = _trinomial_slice(12)
    fine = BoxPartition.of(2, 1)
    assert tv_on_boxes(quenched, reference, fine.coarsened(2)) <= tv_on_boxes(quenched, reference, fine) + 1e-12


# ----------------------------------------------------------------------
# ladder
# ----------------------------------------------------------------------

@pytest.mark.parametrize("N, scales, depth, checkpoints", [
    (4096, [4096, 64, 8], 2, [4024, 4088, 4096]),
    (256, [256, 16], 1, [240, 256]),
    (64, [64, 8], 1, [56, 64]),
])
def test_ladder_scales(N, scales, depth, checkpoints):
    assert ladder_scales(N, 0.4, 5) == (scales, depth, checkpoints)


def test_ladder_needs_depth():
    with pytest.raises(ConfigurationError):
        ladder_scales(8, 0.4, 5)


def test_ladder_vanishes_on_open_field():
    field = make_field(1, 70, (0, 64), 1.0)
    _, _, checkpoints = ladder_scales(64, 0.5, 2)
    ladder = scale_ladder(field, 64, 0.5, 2, {t: _trinomial_slice(t) for t in checkpoints})
    assert ladder.scales == (64, 8, 2)
    assert ladder.checkpoints == (54, 62, 64)
    assert ladder.sides() == (8, 2, 1)
    np.testing.assert_allclose(ladder.lambdas, 0.0, atol=1e-12)
    assert ladder.increments_hold()
    assert list(ladder.to_frame().columns) == ["k", "n_k", "N_k", "lambda_k"]


def test_ladder_matches_direct_box_distances():
    field = make_field(1, 40, (0, 40), 0.7, seed=21)
    _, _, checkpoints = ladder_scales(16, 0.5, 1.9)
    annealed = estimate_annealed_series(WalkModel(d=1, p=0.7), checkpoints, reps=20, base_seed=2)
    ladder = scale_ladder(field, 16, 0.5, 1.9, annealed)
    for n_k, t_k, value in zip(ladder.scales, ladder.checkpoints, ladder.lambdas):
        quenched = propagate_quenched(field, ((0,), 0), t_k)
        direct = tv_on_boxes(quenched, annealed[t_k], BoxPartition.of(n_k ** 0.5, 1))
        assert value == pytest.approx(direct, abs=1e-12)
        assert 0.0 <= value <= 2.0


def test_ladder_requires_every_checkpoint(open_field_1d):
    with pytest.raises(ConfigurationError):
        scale_ladder(open_field_1d, 16, 0.5, 1.9, {16: _trinomial_slice(16)})


# ----------------------------------------------------------------------
# good and social boxes
# ----------------------------------------------------------------------

@pytest.mark.parametrize("p", [1.0, 0.0])
def test_every_box_is_good_on_degenerate_fields(p):
    field = make_field(1, 30, (0, 20), p)
    partition = BoxPartition.of(3, 1)
    box_map = classify_good(field, partition, 16, 0.4, 0.24, _trinomial_slice(16), radius=3)
    assert len(box_map.boxes) == 3
    assert box_map.fraction(True) == 1.0
    assert box_map.boxes["bad_sites"].sum() == 0
    assert box_map.box_set(False) == []


def test_good_boxes_need_matching_annealed_time(open_field_1d):
    with pytest.raises(ConfigurationError):
        classify_good(open_field_1d, BoxPartition.of(3, 1), 16, 0.4, 0.24, _trinomial_slice(12))


def test_every_box_is_social_at_p_one():
    field = make_field(1, 30, (0, 20), 1.0)
    social = classify_social(field, 2, C=4, N=0, radius=4)
    assert social.fraction(False) == 0.0
    assert non_social_mass(social, _trinomial_slice(4)) == 0.0


def test_separated_backbone_paths_are_not_social():
    occupancy = np.zeros((11, 25), dtype=bool)
    occupancy[0, [12, 13]] = True
    occupancy[1:, 11] = True
    occupancy[1:, 14] = True
    field = field_from_bits(occupancy, (0, 10))
    social = classify_social(field, 2, C=4, N=0, radius=0)
    assert social.box_set(False) == [(0,)]
    point = DistributionSlice(n=0, lower=(0,), mass=np.array([1.0]))
    assert non_social_mass(social, point) == 1.0


# ----------------------------------------------------------------------
# coupling
# ----------------------------------------------------------------------

def test_tv_coupling_marginals_and_diagonal():
    a = np.array([0.5, 0.5, 0.0])
    b = np.array([0.0, 0.5, 0.5])
    plan = tv_coupling(a, b)
    np.testing.assert_allclose(plan.sum(axis=1), a)
    np.testing.assert_allclose(plan.sum(axis=0), b)
    assert np.trace(plan) == pytest.approx(0.5)
    assert np.all(plan >= 0)


def test_coupling_on_open_field_matches_trinomial_collision():
    model = WalkModel(d=1, p=1.0)
    transition = annealed_box_transition(model, 4, 4, reps=2)
    field = sample_field(model, 0, plan_window(model, None, 4))
    summary, diagonal = build_coupling(field, transition)
    assert summary.theta == pytest.approx(1107 / 6561, abs=1e-12)
    assert diagonal == pytest.approx(1.0)
    assert summary.quenched_residual < 1e-12
    assert summary.annealed_residual < 1e-12


def test_coupling_marginals_are_exact():
    model = WalkModel(d=1, p=0.7)
    transition = annealed_box_transition(model, 8, 2, reps=20, base_seed=1)
    assert transition.site_law.sum() == pytest.approx(1.0)
    assert transition.box_law.sum() == pytest.approx(1.0)
    field = sample_field(model, 99, plan_window(model, None, 8))
    summary, _ = build_coupling(field, transition)
    assert summary.quenched_residual < 1e-10
    assert summary.annealed_residual < 1e-10
    assert 0.0 <= summary.theta <= 1.0
    assert summary.boxes >= 1


def test_box_transition_rejects_bad_sides():
    with pytest.raises(ConfigurationError):
        annealed_box_transition(WalkModel(d=1, p=0.7), 4, 5, reps=1)


def test_coupling_needs_a_shared_window(open_field_1d):
    transition = annealed_box_transition(WalkModel(d=1, p=1.0), 4, 2, reps=1)
    with pytest.raises(ConfigurationError):
        build_coupling(open_field_1d, transition)


# ----------------------------------------------------------------------
# pair mixing and derivatives
# ----------------------------------------------------------------------

def test_pair_tv(open_field_1d, random_field_1d):
    assert pair_tv(random_field_1d, (0,), (0,), 10) == 0.0
    short = pair_tv(open_field_1d, (0,), (1,), 4)
    long = pair_tv(open_field_1d, (0,), (1,), 16)
    assert 0.0 < long < short < 1.0


def test_partition_oscillation_of_box_constant_law():
    law = np.array([0.25, 0.25, 0.1, 0.1, 0.3])
    value, error = partition_oscillation(law, (0,), BoxPartition.of(2, 1))
    assert value == pytest.approx(0.0)
    assert error == 0.0
    value, _ = partition_oscillation(np.array([0.5, 0.2]), (0,), BoxPartition.of(2, 1))
    assert value == pytest.approx(0.3)


def test_derivative_table_shape():
    table = derivative_estimates(WalkModel(d=1, p=0.7), [4, 6], reps=10, base_seed=3)
    assert len(table) == 2 * (len(DERIVATIVE_TYPES) + 1)
    assert set(table["statistic"]) == set(DERIVATIVE_TYPES) | {"partition"}
    assert (table["value"] >= 0).all()
    with pytest.raises(ConfigurationError):
        derivative_estimates(WalkModel(d=1, p=0.7), [1], reps=2)


def _trinomial_differences(n: int) -> dict:
    law = trinomial(n)
    shorter = np.pad(trinomial(n - 1), 1)
    space = np.abs(np.pad(law, (0, 1)) - np.pad(law, (1, 0))).max()
    time = np.abs(law - shorter).max()
    return {"start_space": n * space, "start_time": n * time,
            "target_space": n * space, "target_time": n * time}


def test_derivatives_without_backbone_are_trinomial_differences():
    table = derivative_estimates(WalkModel(d=1, p=0.0), [25, 50, 100], reps=2)
    for n in (25, 50, 100):
        expected = _trinomial_differences(n)
        rows = table[table["n"] == n].set_index("statistic")
        for name in DERIVATIVE_TYPES:
            assert rows.loc[name, "value"] == pytest.approx(expected[name], rel=1e-9, abs=1e-12)
            assert rows.loc[name, "stderr"] == pytest.approx(0.0, abs=1e-12)
    at_25 = table[table["n"] == 25].set_index("statistic")["value"]
    assert at_25["start_time"] == pytest.approx(0.049221, abs=1e-6)
    assert at_25["start_space"] == pytest.approx(0.353678, abs=1e-6)
