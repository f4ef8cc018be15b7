from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from contrastbayes import core
from contrastbayes.core import ContrastProblem, ParamBox


def quadratic(m: float, t: float, curvature: float = 1.0) -> ContrastProblem:
    return ContrastProblem(
        t=t,
        value=lambda a: 0.5 * curvature * float((a[0] - m) ** 2),
        gradient=lambda a: np.array([curvature * (a[0] - m)]),
        hessian=lambda a: np.array([[curvature]]),
        batch_value=lambda pts: 0.5 * curvature * (pts[:, 0] - m) ** 2,
    )


def gaussian_mean_problem(x: np.ndarray) -> ContrastProblem:
    """``U_n(a) = sum (x_i - a)^2 / 2n`` with a resimulation hook at unit variance."""
    n = x.size

    def resim(at, seed):
        return gaussian_mean_problem(np.random.default_rng(seed).normal(at[0], 1.0, n))

    return ContrastProblem(
        t=float(n),
        value=lambda a: float(np.sum((x - a[0]) ** 2) / (2 * n)),
        gradient=lambda a: np.array([-(x.mean() - a[0])]),
        hessian=lambda a: np.array([[1.0]]),
        resimulate=resim,
        batch_value=lambda pts: np.array([np.sum((x - p) ** 2) / (2 * n) for p in pts[:, 0]]),
    )


def gaussian_setup(mean, cov, t, nodes=201, width=6.0):
    """Problem, flat prior and grid whose posterior is an exact Gaussian."""
    mean = np.asarray(mean, float)
    cov = np.atleast_2d(np.asarray(cov, float))
    sd = np.sqrt(np.diag(cov))
    box = ParamBox(mean - width * sd, mean + width * sd)
    prec = np.linalg.inv(cov)

    def value(a):
        d = np.asarray(a) - mean
        return float(0.5 * d @ prec @ d / t)

    problem = ContrastProblem(t=t, value=value,
                              batch_value=lambda pts: 0.5 * np.einsum("ki,ij,kj->k", pts - mean, prec, pts - mean) / t)
    prior = core.uniform_prior(box)
    return problem, prior, core.evaluate_cb_posterior(problem, prior, core.grid_axes(box, nodes))


def tabulated_gaussian_grid(mean, cov, t, nodes=201, width=6.0) -> core.PosteriorGrid:
    return gaussian_setup(mean, cov, t, nodes, width)[2]


# ---------------------------------------------------------------- boxes and priors


def test_param_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        ParamBox([1.0], [0.0])


def test_param_box_geometry():
    box = ParamBox([0, -1], [2, 1])
    assert box.dim == 2
    assert box.volume == pytest.approx(4.0)
    assert box.contains([1, 0]) and not box.contains([3, 0])
    assert np.allclose(box.clamp([5, -5]), [2, -1])


def test_uniform_prior_is_normalised_and_zero_outside():
    box = ParamBox([0.0], [4.0])
    prior = core.uniform_prior(box)
    assert prior(np.array([[1.0]]))[0] == pytest.approx(-math.log(4.0))
    assert prior(np.array([[5.0]]))[0] == -np.inf


# ---------------------------------------------------------------- posterior grid


def test_flat_prior_posterior_integrates_to_one():
    problem = quadratic(1.0, 50.0)
    box = ParamBox([0.0], [4.0])
    grid = core.evaluate_cb_posterior(problem, core.uniform_prior(box), core.grid_axes(box, 401))
    assert abs(grid.total_mass() - 1.0) < 1e-3


def test_large_t_does_not_underflow():
    problem = quadratic(1.0, 1e6)
    box = ParamBox([0.0], [4.0])
    grid = core.evaluate_cb_posterior(problem, core.uniform_prior(box), core.grid_axes(box, 4001))
    assert np.isfinite(grid.density).all()
    assert grid.density.max() > 0


def test_all_excluded_points_raise_empty_posterior():
    problem = ContrastProblem(t=10.0, value=lambda a: math.inf, batch_value=lambda p: np.full(len(p), np.inf))
    box = ParamBox([0.0], [1.0])
    with pytest.raises(core.EmptyPosteriorError):
        core.evaluate_cb_posterior(problem, core.uniform_prior(box), core.grid_axes(box, 11))


def test_moments_of_tabulated_gaussian():
    grid = tabulated_gaussian_grid([0.0, 0.0], np.diag([1.0, 4.0]), t=1.0)
    mean, cov = core.posterior_moments(grid)
    assert np.allclose(mean, 0.0, atol=1e-6)
    assert np.allclose(np.diag(cov), [1.0, 4.0], rtol=0.01)


def test_uniform_density_variance():
    problem = ContrastProblem(t=1.0, value=lambda a: 0.0, batch_value=lambda p: np.zeros(len(p)))
    box = ParamBox([0.0], [4.0])
    grid = core.evaluate_cb_posterior(problem, core.uniform_prior(box), core.grid_axes(box, 401))
    _, cov = core.posterior_moments(grid)
    assert cov[0, 0] == pytest.approx(16 / 12, rel=0.01)


@settings(max_examples=25, deadline=None)
@given(m=st.floats(-2.0, 2.0), log_t=st.floats(0.0, 3.0))
def test_symmetric_posterior_mean_equals_center(m, log_t):
    t = 10.0**log_t
    sd = 1 / math.sqrt(t)
    box = ParamBox([m - 8 * sd], [m + 8 * sd])
    problem = quadratic(m, t)
    grid = core.evaluate_cb_posterior(problem, core.uniform_prior(box), core.grid_axes(box, 201))
    mean, _ = core.posterior_moments(grid)
    step = grid.axes[0][1] - grid.axes[0][0]
    assert abs(mean[0] - m) <= step / 100


@settings(max_examples=25, deadline=None)
@given(m=st.floats(-1.0, 1.0), log_t=st.floats(0.5, 3.5), nodes=st.integers(51, 301))
def test_posterior_grid_normalisation_property(m, log_t, nodes):
    t = 10.0**log_t
    box = ParamBox([-3.0], [3.0])
    grid = core.evaluate_cb_posterior(quadratic(m, t), core.uniform_prior(box), core.grid_axes(box, nodes))
    assert abs(grid.total_mass() - 1.0) < 1e-3


def test_marginal_interval_of_gaussian():
    grid = tabulated_gaussian_grid([1.0], [[0.25]], t=1.0, nodes=2001)
    lo, hi = grid.marginal_interval(0, 0.95)
    assert lo == pytest.approx(1 - 1.959964 * 0.5, abs=2e-3)
    assert hi == pytest.approx(1 + 1.959964 * 0.5, abs=2e-3)


# ---------------------------------------------------------------- MAP


def test_map_flat_prior_equals_argmin():
    box = ParamBox([0.0], [4.0])
    est = core.map_estimate(quadratic(1.2345, 100.0), core.uniform_prior(box))
    assert abs(est.point[0] - 1.2345) < 1e-6
    assert not est.on_boundary


@pytest.mark.parametrize("t", [10.0, 100.0, 1000.0])
def test_map_conjugate_shrinkage(t):
    m, s2 = 0.7, 2.0
    box = ParamBox([-5.0], [5.0])
    prior = core.gaussian_prior([0.0], [s2], box)
    est = core.map_estimate(quadratic(m, t), prior)
    assert est.point[0] == pytest.approx(m * t * s2 / (1 + t * s2), abs=1e-8)


def test_map_two_dimensional_quadratic():
    target = np.array([0.3, -0.4])
    problem = ContrastProblem(t=100.0, value=lambda a: float(np.sum((a - target) ** 2 * [1.0, 5.0])))
    box = ParamBox([-1.0, -1.0], [1.0, 1.0])
    est = core.map_estimate(problem, core.uniform_prior(box))
    assert np.allclose(est.point, target, atol=1e-6)


def test_map_on_boundary_warns_and_flags():
    box = ParamBox([0.0], [1.0])
    with pytest.warns(core.BoundaryWarning):
        est = core.map_estimate(quadratic(3.0, 10.0), core.uniform_prior(box))
    assert est.on_boundary
    assert box.contains(est.point)


def test_map_boundary_warning_can_be_silenced():
    box = ParamBox([0.0], [1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        est = core.map_estimate(quadratic(3.0, 10.0), core.uniform_prior(box), warn=False)
    assert est.on_boundary


# ---------------------------------------------------------------- posterior information


def test_info_from_exact_gaussian_posterior():
    t = 50.0
    info = np.diag([2.0, 5.0])
    grid = tabulated_gaussian_grid([0.0, 0.0], np.linalg.inv(t * info), t)
    est = core.MapEstimate(np.zeros(2), 0.0, True, False)
    out = core.info_from_posterior(grid, est, t)
    assert np.allclose(np.diag(out.matrix), [2.0, 5.0], rtol=0.02)
    assert out.shortcut is None


def test_scalar_shortcut_recovers_inverse_variance():
    t, s2 = 200.0, 0.8
    problem, prior, grid = gaussian_setup([0.0], [[s2 / t]], t)
    est = core.map_estimate(problem, prior)
    out = core.info_from_posterior(grid, est, t)
    assert out.shortcut == pytest.approx(1 / s2, rel=0.01)
    assert out.matrix[0, 0] == pytest.approx(1 / s2, rel=0.02)


# ---------------------------------------------------------------- Monte Carlo


def test_gamma_of_deterministic_gradient_is_zero():
    problem = quadratic(0.0, 10.0)
    det = ContrastProblem(t=10.0, value=problem.value, gradient=problem.gradient,
                          hessian=problem.hessian, resimulate=lambda at, seed: problem)
    assert np.allclose(core.mc_estimate_gamma(det, [0.5], 20, 0), 0.0)
    assert np.allclose(core.mc_estimate_info(det, [0.5], 5, 0), 1.0)


def test_gamma_of_gaussian_mean_contrast():
    reps = 2000
    problem = gaussian_mean_problem(np.zeros(50))
    gamma = core.mc_estimate_gamma(problem, [0.0], reps, 1)
    assert abs(gamma[0, 0] - 1.0) < 3 * math.sqrt(2 / reps)
    assert core.mc_estimate_info(problem, [0.0], 100, 1)[0, 0] == pytest.approx(1.0)


def test_mc_estimates_are_schedule_independent():
    problem = gaussian_mean_problem(np.zeros(30))
    a = core.mc_estimate_sandwich(problem, [0.1], 64, 9, threads=1)
    b = core.mc_estimate_sandwich(problem, [0.1], 64, 9, threads=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_mc_needs_two_reps():
    with pytest.raises(ValueError):
        core.mc_estimate_gamma(gaussian_mean_problem(np.zeros(5)), [0.0], 1, 0)


def test_replication_failure_carries_index():
    def fn(i, seed):
        if i == 3:
            raise RuntimeError("boom")
        return i

    with pytest.raises(core.ReplicationError) as info:
        core.replicate(fn, 5, 0)
    assert info.value.index == 3


def test_derive_seed_is_stable_and_distinct():
    assert core.derive_seed(1, 2) == core.derive_seed(1, 2)
    assert len({core.derive_seed(0, i) for i in range(1000)}) == 1000


# ---------------------------------------------------------------- limit law and regions


def test_limit_distribution_collapses_when_gamma_equals_info():
    d = core.limit_distribution(np.array([0.0, 0.0]), np.diag([2.0, 4.0]), np.diag([2.0, 4.0]), 10.0)
    assert np.allclose(d.covariance, np.diag([1 / 20, 1 / 40]))


def test_limit_distribution_reference_values():
    # Gamma 1.97, I 0.27, t 400 and the posterior variant with I 0.20
    assert core.limit_distribution([1.34], [[0.27]], [[1.97]], 400).covariance[0, 0] == pytest.approx(0.0676, abs=5e-4)
    assert core.limit_distribution([1.34], [[0.20]], [[1.97]], 400).covariance[0, 0] == pytest.approx(0.123, abs=5e-4)


def test_limit_distribution_rejects_singular_info():
    with pytest.raises(core.InferenceError):
        core.limit_distribution([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]], np.eye(2), 10.0)


def test_confidence_interval_standard_normal():
    region = core.confidence_region(core.LimitDistribution([0.0], [[1.0]]), 0.95)
    assert np.allclose(region.intervals[0], [-1.96, 1.96], atol=1e-3)


def test_confidence_interval_degenerate():
    region = core.confidence_region(core.LimitDistribution([2.0], [[0.0]]), 0.9)
    assert np.allclose(region.intervals[0], [2.0, 2.0])


@pytest.mark.parametrize("level", [0.0, 1.0, -0.5, 1.5])
def test_confidence_level_must_be_inside_unit_interval(level):
    with pytest.raises(ValueError):
        core.confidence_region(core.LimitDistribution([0.0], [[1.0]]), level)


def test_ellipse_radius_is_chi_square_quantile():
    region = core.confidence_region(core.LimitDistribution([0.0, 0.0], np.eye(2)), 0.95)
    assert region.radius2 == pytest.approx(stats.chi2.ppf(0.95, 2))
    assert region.contains([1.0, 1.0]) and not region.contains([2.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(0.1, 3), min_size=2, max_size=2))
def test_limit_covariance_is_symmetric_psd(entries, diag):
    a = np.array(entries).reshape(2, 2) + 4 * np.eye(2)
    gamma = np.diag(diag)
    d = core.limit_distribution([0.0, 0.0], a, gamma, 7.0)
    assert np.allclose(d.covariance, d.covariance.T)
    assert np.linalg.eigvalsh(d.covariance).min() >= -1e-12


# ---------------------------------------------------------------- finite differences


def test_finite_differences_on_polynomial():
    f = lambda a: float(a[0] ** 2)  # noqa: E731
    g = core.finite_difference_gradient(f, [3.0])
    h = core.finite_difference_hessian(f, [3.0])
    assert abs(g[0] - 6) / 6 < 1e-6
    assert abs(h[0, 0] - 2) / 2 < 1e-4


def test_finite_differences_of_constant_vanish():
    f = lambda a: 5.0  # noqa: E731
    assert np.allclose(core.finite_difference_gradient(f, [1.0, 2.0]), 0.0)
    assert np.allclose(core.finite_difference_hessian(f, [1.0, 2.0]), 0.0)


def test_finite_differences_reject_nonfinite_values():
    f = lambda a: math.inf if a[0] > 1.0 else 0.0  # noqa: E731
    with pytest.raises(core.ContrastEvaluationError):
        core.finite_difference_gradient(f, [1.0])
