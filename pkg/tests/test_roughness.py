from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from contrastbayes import core, oracles, roughness
from contrastbayes.roughness import MomentPair, TransectDesign
from contrastbayes.simulators import SurfaceSample


# ---------------------------------------------------------------- kappa


def test_kappa_positive_and_cross_validated():
    k = roughness.kappa_constant()
    assert k > 0
    assert abs(roughness.kappa_gauss_legendre() - roughness.kappa_adaptive()) < 1e-4 * k
    assert k == pytest.approx(roughness.KAPPA_REFERENCE, rel=1e-9)


def test_kappa_below_comparison_integral():
    bound, _ = integrate.dblquad(lambda v, u: (u * v) ** 5 / (u + v) ** 11, 0, 1, 0, 1)
    assert roughness.kappa_constant() < (math.pi / 2) ** 2 * bound


def test_kappa_is_stable_across_calls():
    assert roughness.kappa_constant() == roughness.kappa_constant()


def test_kappa_override_is_used(monkeypatch):
    monkeypatch.setenv(roughness.KAPPA_ENV, "0.05")
    assert roughness.kappa_constant() == 0.05


# ---------------------------------------------------------------- moment formulas


def test_expected_moments_reference_values():
    e = roughness.expected_moments((46.6, 3.28))
    assert e[0] == pytest.approx(6 * math.pi * 46.6 / 3.28**4)
    assert e[0] == pytest.approx(7.59, abs=0.01)
    assert np.allclose(roughness.expected_moments((0.0, 3.0)), 0.0)


def test_jacobian_matches_closed_form_and_differences():
    a, b = 30.0, 2.5
    j = roughness.moments_jacobian((a, b))
    closed = np.array([[6 * math.pi / b**4, -24 * math.pi * a / b**5],
                       [72 * math.pi**2 * a / b**8 + 24 * math.pi / b**5,
                        -288 * math.pi**2 * a**2 / b**9 - 120 * math.pi * a / b**6]])
    assert np.allclose(j, closed, rtol=1e-13)
    for k in range(2):
        fd = core.finite_difference_gradient(lambda p: float(roughness.expected_moments(p)[k]), (a, b))
        assert np.allclose(j[k], fd, rtol=1e-6)


def test_v_entries_reference_formula():
    a, b = 46.6, 3.28
    k = roughness.kappa_constant()
    v = roughness.asymptotic_variance_V((a, b))
    f = math.factorial
    assert v[0, 0] == pytest.approx(f(5) * 16 / 3 * a / b**6)
    assert v[0, 1] == pytest.approx(f(6) * 16 / 3 * a / b**7 + f(5) * 64 * math.pi * a**2 / b**10)
    assert v[1, 1] == pytest.approx(f(7) * 16 / 3 * a / b**8 + (f(6) * 128 * math.pi + f(10) * 32 * k) * a**2 / b**11
                                    + f(3) * f(5) * 128 * math.pi**2 * a**3 / b**14)
    assert np.allclose(v, v.T)


def test_v_vanishes_without_cylinders():
    assert np.allclose(roughness.asymptotic_variance_V((0.0, 3.0)), 0.0)


def test_v_alpha_scaling():
    b = 3.0
    v1 = roughness.asymptotic_variance_V((1.0, b))
    v2 = roughness.asymptotic_variance_V((2.0, b))
    assert v2[0, 0] == pytest.approx(2 * v1[0, 0])
    # V12 = c1 a + c2 a^2: recover both coefficients from a = 1, 2
    c2 = (v2[0, 1] - 2 * v1[0, 1]) / 2
    assert c2 == pytest.approx(120 * 64 * math.pi / b**10)


def test_info_matrix_is_gram_form():
    th = (20.0, 3.0)
    j = roughness.moments_jacobian(th)
    v = roughness.asymptotic_variance_V(th)
    info = roughness.info_matrix_moments(th)
    assert np.allclose(info, j.T @ np.linalg.inv(v) @ j)
    assert np.linalg.eigvalsh(info).min() > 0


# ---------------------------------------------------------------- data handling


def test_moment_pair_jensen_guard():
    with pytest.raises(ValueError):
        MomentPair(2.0, 3.0, 10.0)
    with pytest.raises(ValueError):
        MomentPair(1.0, 2.0, 0.0)


def test_sample_moments_of_constants():
    s = SurfaceSample((np.full(20, 2.0),), 1.0)
    m = roughness.sample_moments(s)
    assert (m.m1, m.m2) == (2.0, 4.0)


def test_sample_moments_of_two_levels():
    s = SurfaceSample((np.tile([0.0, 2.0], 10),), 1.0)
    m = roughness.sample_moments(s)
    assert (m.m1, m.m2) == (1.0, 2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=2, max_size=200))
def test_sample_moments_respect_jensen(heights):
    m = roughness.sample_moments(SurfaceSample((np.array(heights),), 2.0))
    assert m.m2 >= m.m1**2 - 1e-9 * max(1.0, m.m2)


def test_detrend_constant_is_exact():
    y = np.full(300, 4.2)
    assert np.allclose(roughness.detrend_kernel(y, 2.0), 4.2, atol=1e-12)


def test_detrend_removes_linear_ramp_in_interior():
    x = np.arange(591) * 2.0
    y = 1.5 + 0.01 * x
    out = roughness.detrend_kernel(y, 2.0, 100.0)
    target = 1.5 + 0.01 * x.mean()
    interior = slice(150, 441)
    assert np.max(np.abs(out[interior] - target)) < 0.01 * abs(target)


def test_detrend_keeps_white_noise_variance():
    y = np.random.default_rng(1).normal(size=591)
    out = roughness.detrend_kernel(y, 2.0, 100.0)
    assert abs(out.var() / y.var() - 1) < 0.1


def test_detrend_input_checks():
    with pytest.raises(ValueError):
        roughness.detrend_kernel(np.ones(5), 2.0)
    with pytest.raises(ValueError):
        roughness.detrend_kernel(np.ones(50), 2.0, bandwidth=1.0)


def test_load_transects_roundtrip(tmp_path):
    from contrastbayes import io

    sample = roughness.simulate_sample((46.6, 3.28), TransectDesign(count=3, length_mm=60), 4)
    manifest = io.write_transects(tmp_path, "t", sample)
    loaded = roughness.load_transects(manifest)
    assert len(loaded) == 3
    assert all(np.array_equal(a, b) for a, b in zip(loaded, sample.transects))
    single = roughness.load_transects(tmp_path / "t_01.txt")
    assert np.array_equal(single[0], sample.transects[0])


# ---------------------------------------------------------------- contrast


def test_contrast_zero_at_expected_moments():
    th = (46.6, 3.28)
    m = MomentPair(*roughness.expected_moments(th), 1000.0)
    assert roughness.wls_contrast(m, th) == pytest.approx(0.0, abs=1e-20)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(2, 99), b=st.floats(1.2, 4.9), d1=st.floats(1e-3, 3), d2=st.floats(1e-3, 30),
       s1=st.sampled_from([-1, 1]), s2=st.sampled_from([-1, 0, 1]))
def test_contrast_positive_for_nonzero_residual(a, b, d1, d2, s1, s2):
    e = roughness.expected_moments((a, b))
    m1, m2 = e[0] + s1 * d1, e[1] + s2 * d2
    if m2 < m1 * m1:
        return
    assert roughness.wls_contrast(MomentPair(m1, m2, 100.0), (a, b)) > 0


def test_batch_contrast_matches_scalar():
    m = MomentPair(7.2, 70.0, 14160.0)
    problem = roughness.roughness_problem(m)
    pts = np.array([[10.0, 2.0], [46.6, 3.28], [90.0, 4.5]])
    assert np.allclose(problem.values(pts), [roughness.wls_contrast(m, p) for p in pts])


@settings(max_examples=10, deadline=None)
@given(a=st.floats(5, 90), b=st.floats(1.5, 4.5), m1=st.floats(3, 12), extra=st.floats(1, 60))
def test_derivatives_match_finite_differences(a, b, m1, extra):
    problem = roughness.roughness_problem(MomentPair(m1, m1 * m1 + extra, 14160.0))
    g, gf = problem.grad([a, b]), core.finite_difference_gradient(problem, [a, b])
    h, hf = problem.hess([a, b]), core.finite_difference_hessian(problem, [a, b])
    assert np.max(np.abs(g - gf)) <= 1e-5 * np.max(np.abs(gf))
    assert np.max(np.abs(h - hf)) <= 1e-3 * np.max(np.abs(hf))


def test_resimulation_requires_design():
    problem = roughness.roughness_problem(MomentPair(7.0, 60.0, 100.0))
    with pytest.raises(core.InferenceError):
        problem.resimulate(np.array([46.6, 3.28]), 0)


def test_simulated_sample_has_design_length():
    d = TransectDesign(count=2, length_mm=100, spacing_mm=2)
    s = roughness.simulate_sample((46.6, 3.28), d, 1)
    assert s.nu_A == d.nu_A == 200.0


# ---------------------------------------------------------------- fit


def test_fit_on_synthetic_sample():
    th = (46.6, 3.28)
    sample = roughness.simulate_sample(th, TransectDesign(), 3)
    rep = roughness.run_roughness_fit(sample)
    assert rep.grid.total_mass() == pytest.approx(1.0, abs=1e-3)
    assert np.all(rep.intervals_post[:, 0] < rep.map.point) and np.all(rep.map.point < rep.intervals_post[:, 1])
    # the posterior marginal and model-based intervals coincide in theory
    assert np.allclose(rep.intervals_post, rep.region.intervals, rtol=0.1)
    # posterior-fit information near J' V^-1 J
    assert np.all(np.abs(rep.info_post.matrix - rep.info_model) <= 0.3 * np.abs(rep.info_model))


def test_fit_flat_prior_map_is_wls_minimiser():
    from scipy.optimize import minimize

    sample = roughness.simulate_sample((46.6, 3.28), TransectDesign(), 5)
    m = roughness.sample_moments(sample)
    rep = roughness.run_roughness_fit(m)
    direct = minimize(lambda p: roughness.wls_contrast(m, p), rep.map.point + [1.0, 0.02], method="Nelder-Mead",
                      options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 10000}).x
    assert np.allclose(rep.map.point, direct, atol=1e-5)


def test_fine_moment_oracle_small():
    # a reduced version of the acceptance oracle, enough to catch gross formula errors
    pairs = oracles.simulate_moment_pairs((20.0, 3.0), 80, TransectDesign(count=1, length_mm=1000, spacing_mm=0.05), 1)
    rows = oracles.moment_checks((20.0, 3.0), pairs, 1000.0, k=4.0)
    assert all(r.passed for r in rows), [r.line() for r in rows if not r.passed]


@pytest.mark.slow
def test_synthetic_calibration_coverage():
    res = roughness.coverage_experiment(outer_reps=100, master_seed=1)
    post, _ = res.rates()
    assert res.failures == 0
    assert np.all(post >= 0.90), post
