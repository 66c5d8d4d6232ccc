import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from opwalk.diagnostics import DEFAULT_PLOTS, EXPERIMENTS, boxes, prefactors
from opwalk.services.experiments import DERIVATIVE_TYPES, build_coupling
from opwalk.services.runner import run_experiment
from opwalk.utils.config import build_config


def _run(tmp_path, **values):
    return run_experiment(build_config({"out_dir": tmp_path, **values}), write=False)


def _values(report, statistic):
    frame = report.frame()
    frame = frame[frame["statistic"] == statistic]
    return frame["value"].to_numpy(dtype=float)


def test_every_default_plot_names_an_experiment():
    assert set(DEFAULT_PLOTS) <= set(EXPERIMENTS)


def test_gen_on_open_environment(tmp_path):
    report = _run(tmp_path, experiment="gen", p=1.0, n=6, seeds=2)
    np.testing.assert_array_equal(_values(report, "open_fraction"), [1.0, 1.0])
    assert report.checks == {"open_fraction_consistent": True}


def test_gen_reports_a_pvalue(tmp_path):
    report = _run(tmp_path, experiment="gen", p=0.5, n=10, seeds=3)
    (pvalue,) = _values(report, "open_fraction_pvalue")
    assert 0.0 <= pvalue <= 1.0
    assert "open_fraction_consistent" in report.checks


def test_backbone_densities(tmp_path):
    report = _run(tmp_path, experiment="backbone", p=0.7, n=8, seeds=2)
    densities = _values(report, "xi_density")
    shallow = _values(report, "xi_density_shallow")
    assert len(densities) == 2
    assert np.all(densities <= shallow + 1e-12)
    assert "slice_density" in report.tables


def test_annealed_matches_enumeration(tmp_path):
    report = _run(tmp_path, experiment="annealed", p=0.6, n=3, reps=2000, seed_base=4)
    assert _values(report, "annealed_mass")[0] == pytest.approx(1.0)
    assert report.checks == {"matches_exact": True}


def test_lclt_at_p_zero(tmp_path):
    report = _run(tmp_path, experiment="lclt", p=0.0, n_list="50,100", reps=1)
    assert _values(report, "sigma2")[0] == pytest.approx(2 / 3)
    assert report.checks == {"lclt_small": True}


def test_qlclt_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="qlclt", p=1.0, n_list="4,8", N_max=2, seeds=2, reps=2)
    np.testing.assert_allclose(_values(report, "qlclt_error"), 0.0, atol=1e-10)
    np.testing.assert_allclose(_values(report, "Z"), 1.0, atol=1e-10)
    assert report.checks["Z_near_one"]


def test_hybrid_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="hybrid", p=1.0, n_list="16", N_max=4, seeds=1, reps=2)
    assert _values(report, "L1_median")[0] == pytest.approx(0.0, abs=1e-10)
    assert report.checks == {"triangle_bound": True}


def test_hits_without_obstacles(tmp_path):
    report = _run(tmp_path, experiment="hits", p=0.0, n_list="1,2", reps=5)
    table = report.tables["hits"]
    np.testing.assert_allclose(table["value"], 1.0)


def test_ladder_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="ladder", p=1.0, N=64, theta=0.4, M=5, seeds=2, reps=2)
    np.testing.assert_allclose(_values(report, "lambda"), 0.0, atol=1e-12)
    assert _values(report, "ladder_exceedance_fraction")[0] == 0.0
    assert report.checks == {"ladder_increments": True}
    assert len([name for name in report.tables if name.startswith("ladder-")]) == 2


def test_goodboxes_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="goodboxes", p=1.0, n_list="16,64", seeds=1, reps=2)
    np.testing.assert_allclose(_values(report, "good_fraction_mean"), 1.0)
    assert report.checks == {"good_fraction_non_decreasing": True}


def test_socialboxes_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="socialboxes", p=1.0, n=4, n_list="2,4", seeds=1, reps=2)
    np.testing.assert_allclose(_values(report, "non_social_mass"), 0.0)
    assert report.checks == {"all_social": True}


def test_couple_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="couple", p=1.0, N=4, M=4, seeds=1, reps=2)
    assert _values(report, "theta_median")[0] == pytest.approx(1107 / 6561, abs=1e-12)
    assert report.checks == {"marginals_exact": True, "theta_positive": True}
    assert _values(report, "theta_min")[0] == pytest.approx(1107 / 6561, abs=1e-12)


def test_theta_positive_needs_every_seed(tmp_path, monkeypatch):
    calls = []

    def one_failed_seed(field, transition):
        summary, rest = build_coupling(field, transition)
        calls.append(summary)
        return (replace(summary, theta=0.0) if len(calls) == 1 else summary), rest

    monkeypatch.setattr(boxes, "build_coupling", one_failed_seed)
    report = _run(tmp_path, experiment="couple", p=1.0, N=4, M=4, seeds=3, reps=2)
    assert _values(report, "theta_median")[0] > 0
    assert _values(report, "theta_min")[0] == 0.0
    assert report.checks["theta_positive"] is False


def test_pairtv_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="pairtv", p=1.0, n_list="4,16", seeds=1)
    medians = _values(report, "pair_tv_median")
    assert medians[1] < medians[0]
    assert report.checks == {"pair_tv_decreasing": True, "pair_tv_small": True}


def test_derivatives_table(tmp_path):
    report = _run(tmp_path, experiment="derivatives", p=0.7, n_list="4,6", reps=5)
    assert len(report.tables["derivatives"]) == 2 * (len(DERIVATIVE_TYPES) + 1)
    assert report.checks["derivatives_finite"]
    assert "derivatives_bounded" in report.checks


def test_prefactor_identities(tmp_path):
    report = _run(tmp_path, experiment="prefactor", p=0.7, n=8, N_max=4, seeds=2, reps=5)
    assert report.checks["harmonic"]
    assert report.checks["pov_matches_walk_kernel"]
    assert np.all(_values(report, "psi_min") >= 0.0)


def test_invariance_of_the_constant(tmp_path):
    report = _run(tmp_path, experiment="invariance", p=0.7, n=6, N_max=4, seeds=2)
    assert report.checks == {"invariance_one_N1": True, "invariance_one_N2": True, "invariance_one_N4": True}
    assert set(report.frame()["group"]) >= {"one", "xi_bit", "patch_density_1"}


def test_intersect_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="intersect", p=1.0, n_list="2,4,8", seeds=2)
    frame = report.frame()
    times = frame[frame["statistic"] == "intersection_time"]
    np.testing.assert_array_equal(sorted(times["value"]), [1, 1, 2, 2, 4, 4])
    np.testing.assert_array_equal(_values(report, "non_intersection_frequency"), [0.0, 0.0, 0.0])
    assert report.checks == {"non_intersection_decreasing": True}


def test_intersect_on_closed_field_never_tries(tmp_path):
    report = _run(tmp_path, experiment="intersect", p=0.0, n_list="2,4", seeds=2)
    assert np.all(np.isnan(_values(report, "non_intersection_frequency")))
    assert report.checks == {}


def test_survival_at_p_one(tmp_path):
    report = _run(tmp_path, experiment="survival", p=1.0, n_list="5,10", seeds=3)
    np.testing.assert_allclose(_values(report, "survival_probability"), 1.0)
    np.testing.assert_allclose(_values(report, "survival_gap"), 0.0)
    assert all(math.isfinite(v) for v in _values(report, "survival_probability"))


def test_survival_gap_decays_with_depth(tmp_path):
    report = _run(tmp_path, experiment="survival", p=0.55, n_list="2,8,32", seeds=1000)
    gaps = _values(report, "survival_gap")
    assert gaps[0] > gaps[-1]
    assert _values(report, "survival_gap_slope")[0] < 0
    assert report.checks == {"survival_gap_decays": True}


def test_prefactor_moments_on_open_field(tmp_path):
    report = _run(tmp_path, experiment="prefactor", p=1.0, n=8, N_max=4, seeds=2, reps=2)
    medians = _values(report, "psi_moment_median")
    assert len(medians) == 4 * 3
    np.testing.assert_allclose(medians, 1.0, atol=1e-12)
    assert report.checks["moments_stable"]


def test_growing_fourth_moment_is_not_stable(tmp_path, monkeypatch):
    def growing_fourth(psi, k_max=4):
        return pd.Series([1.0, 1.0, 1.0, float(psi.N)], index=pd.RangeIndex(1, k_max + 1, name="k"))

    monkeypatch.setattr(prefactors, "prefactor_moments", growing_fourth)
    report = _run(tmp_path, experiment="prefactor", p=0.7, n=8, N_max=8, seeds=2, reps=5)
    assert report.checks["moments_stable"] is False


def test_derivatives_without_backbone_stay_bounded(tmp_path):
    report = _run(tmp_path, experiment="derivatives", p=0.0, n_list="25,50,100", reps=2)
    assert report.checks == {"derivatives_finite": True, "derivatives_bounded": True}


# ----------------------------------------------------------------------
# desk-scale trends at p = 0.8, d = 1
# ----------------------------------------------------------------------

def _supercritical(tmp_path, **values):
    return _run(tmp_path, d=1, p=0.8, **values)


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_qlclt_error_decreases_and_Z_concentrates(tmp_path):
    report = _supercritical(tmp_path, experiment="qlclt", n_list="25,50,100,200", seeds=50)
    assert report.checks == {"qlclt_decreasing": True, "Z_near_one": True}


@pytest.mark.slow
def test_lclt_error_is_small_without_backbone(tmp_path):
    report = _run(tmp_path, experiment="lclt", p=0.0, n_list="100", reps=1)
    assert _values(report, "lclt_error")[0] < 0.05


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_lclt_error_decreases(tmp_path):
    report = _supercritical(tmp_path, experiment="lclt", n_list="50,100,200")
    assert report.checks == {"lclt_decreasing": True}


@pytest.mark.slow
def test_hitting_frequency_decays_log_linearly(tmp_path):
    report = _supercritical(tmp_path, experiment="hits", n_list="5,10,20,40", reps=10_000)
    assert report.checks == {"hits_decay": True}


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_ladder_increments_hold_in_most_seeds(tmp_path):
    report = _supercritical(tmp_path, experiment="ladder", N=4096, theta=0.4, M=5, seeds=30)
    assert report.checks == {"ladder_increments": True}


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_hybrid_limits_decrease(tmp_path):
    report = _supercritical(tmp_path, experiment="hybrid", n_list="64,128,256", eps=0.24, delta=0.1, seeds=30)
    assert report.checks == {"L1_decreasing": True, "L2_decreasing": True, "L3_decreasing": True,
                             "triangle_bound": True}


@pytest.mark.slow
def test_coupling_is_exact_and_theta_positive(tmp_path):
    report = _supercritical(tmp_path, experiment="couple", N=100, M=5, seeds=30)
    assert report.checks == {"marginals_exact": True, "theta_positive": True}
    assert _values(report, "theta_min")[0] > 0


@pytest.mark.slow
def test_pair_tv_decreases_below_ceiling(tmp_path):
    report = _supercritical(tmp_path, experiment="pairtv", n_list="50,100,200", seeds=30)
    medians = _values(report, "pair_tv_median")
    assert medians[-1] < 0.3
    assert report.checks == {"pair_tv_decreasing": True, "pair_tv_small": True}


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_good_fraction_grows_with_scale(tmp_path):
    report = _supercritical(tmp_path, experiment="goodboxes", n_list="16,64", seeds=30)
    assert report.checks == {"good_fraction_non_decreasing": True}


@pytest.mark.slow
def test_non_social_fraction_shrinks_with_side(tmp_path):
    report = _supercritical(tmp_path, experiment="socialboxes", n=32, n_list="2,4,8", seeds=30)
    assert report.checks == {"non_social_decreasing": True}


@pytest.mark.slow
def test_non_intersection_frequency_decays(tmp_path):
    report = _supercritical(tmp_path, experiment="intersect", n_list="2,4,8", seeds=200)
    frequencies = _values(report, "non_intersection_frequency")
    assert len(frequencies) == 3 and frequencies[-1] <= frequencies[0]
    assert report.checks == {"non_intersection_decreasing": True}


@pytest.mark.slow
def test_survival_gap_shrinks_with_depth(tmp_path):
    report = _supercritical(tmp_path, experiment="survival", n_list="10,20,40", seeds=5000)
    gaps = _values(report, "survival_gap")
    assert gaps[-1] <= gaps[0]
    assert report.checks.get("survival_gap_decays", True)


@pytest.mark.slow
@pytest.mark.timeout(900)
def test_scaled_derivatives_stay_bounded(tmp_path):
    report = _supercritical(tmp_path, experiment="derivatives", n_list="25,50,100", reps=2000)
    assert report.checks == {"derivatives_finite": True, "derivatives_bounded": True}
