from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastbayes import core, variogram
from contrastbayes.simulators import LatticeField, simulate_grf_exponential


def test_lag_classes_for_twenty_by_twenty():
    lags = variogram.lag_classes(20)
    assert lags.size == 72
    assert lags[0] == 1.0
    assert lags[-1] ** 2 == pytest.approx(180.0)
    # every lag is strictly shorter than half the diagonal
    assert np.all(lags < 19 * math.sqrt(2) / 2)


def test_lag_classes_small_grids():
    assert variogram.lag_classes(3).tolist() == [1.0]
    assert variogram.lag_classes(2).size == 0


def test_sample_variogram_of_checkerboard():
    fld = LatticeField(np.array([[0.0, 1.0], [1.0, 0.0]]))
    vario = variogram.sample_variogram(fld, lags=[1.0])
    assert vario.gamma_hat[0] == 0.5
    assert vario.counts[0] == 4


def test_sample_variogram_of_constant_field_is_zero():
    vario = variogram.sample_variogram(LatticeField(np.full((6, 6), 3.0)))
    assert np.all(vario.gamma_hat == 0)


def test_sample_variogram_matches_brute_force():
    fld = simulate_grf_exponential(7, 1.0, 3)
    vario = variogram.sample_variogram(fld)
    x = fld.values
    idx = [(i, j) for i in range(7) for j in range(7)]
    for h, g, c in zip(vario.lags, vario.gamma_hat, vario.counts):
        pairs = [(x[a] - x[b]) ** 2 for k, a in enumerate(idx) for b in idx[k + 1:]
                 if abs(math.dist(a, b) - h) < 1e-9]
        assert len(pairs) == c
        assert g == pytest.approx(sum(pairs) / (2 * len(pairs)), rel=1e-12)


def test_contrast_is_zero_at_exact_model():
    lags = variogram.lag_classes(10)
    vario = variogram.EmpiricalVariogram(lags, 1 - np.exp(-0.8 * lags), np.ones(lags.size, dtype=int))
    assert variogram.ls_contrast(vario, 0.8) == pytest.approx(0.0, abs=1e-30)
    assert variogram.ls_contrast_gradient(vario, 0.8) == pytest.approx(0.0, abs=1e-15)


def test_contrast_is_vectorised():
    vario = variogram.sample_variogram(simulate_grf_exponential(10, 1.0, 1))
    alphas = np.linspace(0.1, 3, 7)
    vec = variogram.ls_contrast(vario, alphas)
    assert np.allclose(vec, [variogram.ls_contrast(vario, a) for a in alphas])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.1, 3.5))
def test_analytic_derivatives_match_finite_differences(seed, alpha):
    problem = variogram.variogram_problem(simulate_grf_exponential(20, 1.0, seed))
    g = problem.grad([alpha])
    h = problem.hess([alpha])
    gf = core.finite_difference_gradient(problem, [alpha])
    hf = core.finite_difference_hessian(problem, [alpha])
    assert abs(g[0] - gf[0]) <= 1e-5 * max(abs(gf[0]), 1e-6)
    assert abs(h[0, 0] - hf[0, 0]) <= 1e-3 * max(abs(hf[0, 0]), 1e-6)


def test_problem_uses_n_squared():
    problem = variogram.variogram_problem(simulate_grf_exponential(20, 1.0, 0))
    assert problem.t == 400.0


def test_resimulation_draws_fresh_fields():
    problem = variogram.variogram_problem(simulate_grf_exponential(12, 1.0, 0))
    a = problem.resimulate(np.array([1.0]), 5)
    b = problem.resimulate(np.array([1.0]), 5)
    c = problem.resimulate(np.array([1.0]), 6)
    assert a.value(np.array([1.0])) == b.value(np.array([1.0])) != c.value(np.array([1.0]))


def test_fit_report_is_consistent():
    fld = simulate_grf_exponential(20, 1.0, 11)
    rep = variogram.run_variogram_fit(fld, config=variogram.VariogramConfig(gamma_reps=60, master_seed=2))
    assert rep.grid.total_mass() == pytest.approx(1.0, abs=1e-3)
    assert 0 < rep.map.point[0] < 4
    lo, hi = rep.ci_mc
    assert lo < rep.map.point[0] < hi
    expected_var = rep.gamma_mc / (400 * rep.info_mc**2)
    assert rep.limit_mc.covariance[0, 0] == pytest.approx(expected_var, rel=1e-10)
    assert rep.info_post_shortcut > 0


def test_fit_flat_prior_map_matches_direct_minimum():
    from scipy.optimize import minimize_scalar

    fld = simulate_grf_exponential(20, 1.0, 12)
    vario = variogram.sample_variogram(fld)
    direct = minimize_scalar(lambda a: variogram.ls_contrast(vario, a), bounds=(0, 4), method="bounded",
                             options={"xatol": 1e-12}).x
    rep = variogram.run_variogram_fit(fld, config=variogram.VariogramConfig(gamma_reps=10))
    assert abs(rep.map.point[0] - direct) < 1e-6


def test_coverage_needs_fifty_replications():
    with pytest.raises(ValueError):
        variogram.coverage_experiment(outer_reps=10)


@pytest.mark.slow
def test_coverage_small_run_is_thread_independent():
    a = variogram.coverage_experiment(outer_reps=50, gamma_reps=20, master_seed=3, threads=1)
    b = variogram.coverage_experiment(outer_reps=50, gamma_reps=20, master_seed=3, threads=4)
    assert a.records == b.records or all(
        (ra.map == rb.map or (math.isnan(ra.map) and math.isnan(rb.map))) for ra, rb in zip(a.records, b.records))
    assert 0.0 <= a.rate_mc <= 1.0
