"""Contrast-based posterior inference.

A contrast ``U_t`` replaces the negative log-likelihood in Bayes' formula, so
the posterior density on the parameter space is proportional to
``exp(-t * U_t(alpha)) * c(alpha)`` for a prior density ``c``.  This module
evaluates that density on rectangular grids, locates its mode, extracts the
information matrix from the posterior shape and estimates the sandwich
variance ``I^-1 Gamma I^-1 / t`` by Monte-Carlo resimulation.

Nothing here knows about a particular contrast; the case-study modules build
:class:`ContrastProblem` instances and hand them to these routines.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

__all__ = [
    "InferenceError",
    "EmptyPosteriorError",
    "ContrastEvaluationError",
    "DegeneratePosteriorError",
    "ReplicationError",
    "BoundaryWarning",
    "as_point",
    "ParamBox",
    "ContrastProblem",
    "Prior",
    "uniform_prior",
    "gaussian_prior",
    "PosteriorGrid",
    "MapEstimate",
    "PosteriorInformation",
    "LimitDistribution",
    "ConfidenceRegion",
    "grid_axes",
    "evaluate_cb_posterior",
    "map_estimate",
    "posterior_moments",
    "info_from_posterior",
    "derive_seed",
    "replicate",
    "mc_derivative_samples",
    "mc_estimate_gamma",
    "mc_estimate_info",
    "mc_estimate_sandwich",
    "limit_distribution",
    "confidence_region",
    "finite_difference_gradient",
    "finite_difference_hessian",
    "trapezoid_weights",
]


class InferenceError(RuntimeError):
    """Base class for numerical failures in posterior inference."""


class EmptyPosteriorError(InferenceError):
    """The contrast is +inf (or the prior is zero) at every grid node."""


class ContrastEvaluationError(InferenceError):
    def __init__(self, message: str, point=None):
        super().__init__(message if point is None else f"{message} at {np.asarray(point).tolist()}")
        self.point = None if point is None else np.asarray(point, dtype=float)


class DegeneratePosteriorError(InferenceError):
    """Posterior covariance is not positive definite."""


class ReplicationError(InferenceError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"replication {index} failed: {cause!r}")
        self.index = index
        self.cause = cause


class BoundaryWarning(UserWarning):
    """Optimum found on the edge of the parameter box."""


def as_point(x) -> np.ndarray:
    """Validate and freeze a parameter vector (1-D, finite, p >= 1)."""
    arr = np.array(x, dtype=float).reshape(-1)
    if arr.size < 1:
        raise ValueError("parameter point must have at least one coordinate")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"parameter point has non-finite entries: {arr.tolist()}")
    arr.setflags(write=False)
    return arr


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParamBox:
    """Compact hyper-rectangle ``[lower, upper]`` in R^p."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = as_point(self.lower), as_point(self.upper)
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have equal dimension")
        if not np.all(lo < hi):
            raise ValueError(f"box needs lower < upper componentwise, got {lo.tolist()} / {hi.tolist()}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def clamp(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def inside(self, other: "ParamBox") -> bool:
        return bool(np.all(other.lower <= self.lower) and np.all(self.upper <= other.upper))


def grid_axes(box: ParamBox, nodes: int | Sequence[int]) -> tuple[np.ndarray, ...]:
    """Evenly spaced axes covering ``box`` (end points included)."""
    if np.isscalar(nodes):
        nodes = [int(nodes)] * box.dim
    return tuple(np.linspace(lo, hi, int(k)) for lo, hi, k in zip(box.lower, box.upper, nodes))


@dataclass(frozen=True)
class ContrastProblem:
    """A contrast ``U_t`` together with its normalising size ``t``.

    ``value`` maps a parameter vector to a float; ``+inf`` means the point is
    excluded.  ``batch_value`` is an optional vectorised form taking a
    ``(k, p)`` array.  ``resimulate(point, seed)`` must return a new problem
    built from fresh synthetic data generated at ``point``.
    """

    t: float
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None
    hessian: Callable[[np.ndarray], np.ndarray] | None = None
    resimulate: Callable[[np.ndarray, int], "ContrastProblem"] | None = None
    batch_value: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise ValueError(f"sample size t must be positive and finite, got {self.t}")

    def values(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.batch_value is not None:
            return np.asarray(self.batch_value(points), dtype=float).reshape(points.shape[0])
        return np.array([float(self.value(p)) for p in points])

    def grad(self, at) -> np.ndarray:
        at = as_point(at)
        if self.gradient is not None:
            return np.atleast_1d(np.asarray(self.gradient(at), dtype=float))
        return finite_difference_gradient(self, at)

    def hess(self, at) -> np.ndarray:
        at = as_point(at)
        if self.hessian is not None:
            h = np.atleast_2d(np.asarray(self.hessian(at), dtype=float))
            return 0.5 * (h + h.T)
        return finite_difference_hessian(self, at)


@dataclass(frozen=True)
class Prior:
    """Prior density ``c`` on ``support``.

    ``log_density`` must be vectorised over leading axes: it receives an array
    of shape ``(..., p)`` and returns shape ``(...)``.
    """

    log_density: Callable[[np.ndarray], np.ndarray]
    support: ParamBox

    def __call__(self, points) -> np.ndarray:
        return np.asarray(self.log_density(np.asarray(points, dtype=float)), dtype=float)


def uniform_prior(box: ParamBox) -> Prior:
    log_vol = math.log(box.volume)
    lo, hi = box.lower, box.upper

    def log_density(x):
        inside = np.all((x >= lo) & (x <= hi), axis=-1)
        return np.where(inside, -log_vol, -np.inf)

    return Prior(log_density, box)


def gaussian_prior(mean, variance, box: ParamBox) -> Prior:
    """Independent normal prior (restricted to ``box``, not renormalised)."""
    mean = as_point(mean)
    var = np.broadcast_to(np.asarray(variance, dtype=float), mean.shape).copy()
    const = -0.5 * np.sum(np.log(2 * np.pi * var))

    def log_density(x):
        return const - 0.5 * np.sum((x - mean) ** 2 / var, axis=-1)

    return Prior(log_density, box)


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    """1-D trapezoid-rule weights for nodes ``x`` (sorted)."""
    x = np.asarray(x, dtype=float)
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def _tensor_weights(axes: Sequence[np.ndarray]) -> np.ndarray:
    w = np.ones(())
    for ax in axes:
        w = np.multiply.outer(w, trapezoid_weights(ax))
    return w


@dataclass(frozen=True)
class PosteriorGrid:
    """Tabulated posterior on a rectangular grid, stored in log space."""

    axes: tuple[np.ndarray, ...]
    log_unnorm: np.ndarray
    log_norm_const: float
    t: float

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.log_unnorm.shape

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_unnorm - self.log_norm_const)

    @property
    def weights(self) -> np.ndarray:
        return _tensor_weights(self.axes)

    @property
    def cell_measure(self) -> np.ndarray:
        """Volume of each grid cell (product of the per-axis steps)."""
        m = np.ones(())
        for ax in self.axes:
            m = np.multiply.outer(m, np.diff(ax))
        return m

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights * values))

    def total_mass(self) -> float:
        return self.integrate(self.density)

    def mode_point(self) -> np.ndarray:
        idx = np.unravel_index(np.argmax(self.log_unnorm), self.shape)
        return np.array([ax[i] for ax, i in zip(self.axes, idx)])

    def marginal(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Marginal density along ``axis`` by trapezoid integration of the others."""
        dens = self.density
        for k in reversed(range(self.dim)):
            if k != axis:
                dens = np.tensordot(dens, trapezoid_weights(self.axes[k]), axes=([k], [0]))
        return self.axes[axis], dens

    def marginal_interval(self, axis: int, level: float = 0.95) -> tuple[float, float]:
        """Equal-tailed interval from the marginal posterior CDF."""
        x, dens = self.marginal(axis)
        cdf = np.concatenate([[0.0], np.cumsum(np.diff(x) * (dens[1:] + dens[:-1]) / 2)])
        cdf /= cdf[-1]
        lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
        return float(np.interp(lo_q, cdf, x)), float(np.interp(hi_q, cdf, x))


@dataclass(frozen=True)
class MapEstimate:
    point: np.ndarray
    objective: float
    refined: bool
    on_boundary: bool = False


def _check_axes(axes, support: ParamBox) -> tuple[np.ndarray, ...]:
    out = []
    if len(axes) != support.dim:
        raise ValueError(f"need {support.dim} axes, got {len(axes)}")
    for k, ax in enumerate(axes):
        ax = _frozen(np.asarray(ax, dtype=float).reshape(-1))
        if ax.size < 3:
            raise ValueError(f"axis {k} needs at least 3 nodes")
        if not np.all(np.diff(ax) > 0):
            raise ValueError(f"axis {k} must be strictly increasing")
        if ax[0] < support.lower[k] or ax[-1] > support.upper[k]:
            raise ValueError(f"axis {k} leaves the prior support")
        out.append(ax)
    return tuple(out)


def _log_target(problem: ContrastProblem, prior: Prior, points: np.ndarray) -> np.ndarray:
    """``-t U(points) + log c(points)`` with +inf contrast mapped to -inf."""
    u = problem.values(points)
    bad = np.isnan(u) | (u == -np.inf)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise ContrastEvaluationError(f"contrast returned {u[k]}", points[k])
    logc = prior(points)
    if np.any(np.isnan(logc) | (logc == np.inf)):
        k = int(np.flatnonzero(np.isnan(logc) | (logc == np.inf))[0])
        raise ContrastEvaluationError(f"log prior returned {logc[k]}", points[k])
    out = -problem.t * u + logc
    out[u == np.inf] = -np.inf
    return out


def evaluate_cb_posterior(problem: ContrastProblem, prior: Prior, axes) -> PosteriorGrid:
    """Tabulate and normalise the contrast-based posterior over ``axes``."""
    axes = _check_axes(axes, prior.support)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    logu = _log_target(problem, prior, pts).reshape(mesh[0].shape)
    top = np.max(logu)
    if top == -np.inf:
        raise EmptyPosteriorError("posterior is zero at every grid node")
    mass = float(np.sum(_tensor_weights(axes) * np.exp(logu - top)))
    if not mass > 0:
        raise EmptyPosteriorError("posterior mass vanishes under trapezoid quadrature")
    logu.setflags(write=False)
    return PosteriorGrid(axes, logu, float(top + math.log(mass)), float(problem.t))


def _golden_section(f, a: float, b: float, xtol: float) -> tuple[float, float]:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _parabolic_polish(f, x: float, fx: float, h: float) -> float:
    """Vertex of the parabola through ``x - h, x, x + h``.

    Golden section only resolves the minimum to about sqrt(eps) because it
    compares function values; the vertex is accurate to about eps / h.
    """
    if h <= 0:
        return x
    fl, fr = f(x - h), f(x + h)
    curv = fl + fr - 2 * fx
    if not (math.isfinite(fl) and math.isfinite(fr)) or curv <= 0:
        return x
    shift = h * (fl - fr) / (2 * curv)
    return x + shift if abs(shift) < h else x


def map_estimate(
    problem: ContrastProblem,
    prior: Prior,
    box: ParamBox | None = None,
    grid_nodes: int = 51,
    xtol: float = 1e-10,
    warn: bool = True,
) -> MapEstimate:
    """Mode of the posterior: minimiser of ``U_t - log(c) / t`` over ``box``.

    A coarse grid scan picks the starting node; golden-section (p = 1) or
    Nelder-Mead (p >= 2) then refines it.  A mode on the box edge is flagged
    and warned about rather than rejected.
    """
    box = prior.support if box is None else box
    if not box.inside(prior.support):
        raise ValueError("optimisation box must lie inside the prior support")
    t = problem.t

    def objective(x) -> float:
        x = np.asarray(x, dtype=float)
        if not box.contains(x):
            return math.inf
        u = float(problem.value(x))
        lc = float(prior(x))
        if math.isnan(u) or u == -math.inf:
            raise ContrastEvaluationError(f"contrast returned {u}", x)
        if u == math.inf or lc == -math.inf:
            return math.inf
        return u - lc / t

    axes = grid_axes(box, grid_nodes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    scan = -_log_target(problem, prior, pts) / t
    k = int(np.argmin(scan))
    if scan[k] == math.inf:
        raise EmptyPosteriorError("objective is +inf on the whole scan grid")
    idx = np.unravel_index(k, mesh[0].shape)
    x0 = pts[k].copy()
    f0 = float(scan[k])
    if not math.isfinite(objective(x0)):
        raise ContrastEvaluationError("non-finite objective at refinement start", x0)

    if box.dim == 1:
        ax = axes[0]
        i = idx[0]
        a, b = ax[max(i - 1, 0)], ax[min(i + 1, ax.size - 1)]
        xr, fr = _golden_section(lambda s: objective([s]), a, b, xtol)
        xr = _parabolic_polish(lambda s: objective([s]), xr, fr, 1e-3 * (ax[1] - ax[0]) if ax.size > 1 else 0.0)
        x, f = np.array([xr]), objective([xr])
    else:
        steps = np.array([ax[1] - ax[0] for ax in axes])
        x, f = x0, f0
        for _ in range(20):
            simplex = [x]
            for j in range(box.dim):
                v = x.copy()
                v[j] += steps[j] if x[j] + steps[j] <= box.upper[j] else -steps[j]
                simplex.append(v)
            res = optimize.minimize(
                objective, x, method="Nelder-Mead",
                options={"initial_simplex": np.array(simplex), "xatol": xtol,
                         "fatol": 1e-15, "maxiter": 20000, "maxfev": 40000},
            )
            moved = np.max(np.abs(res.x - x))
            if res.fun <= f:
                x, f = np.asarray(res.x, dtype=float), float(res.fun)
            steps = np.maximum(steps / 100, 100 * xtol)
            if moved <= xtol:
                break
    if f > f0:
        x, f = x0, f0
    x = box.clamp(x)
    f = objective(x)
    span = box.upper - box.lower
    edge_tol = np.maximum(10 * xtol, 1e-9 * span)
    on_edge = bool(np.any(x - box.lower <= edge_tol) or np.any(box.upper - x <= edge_tol))
    if on_edge and warn:
        warnings.warn(f"MAP estimate {x.tolist()} lies on the box boundary", BoundaryWarning, stacklevel=2)
    return MapEstimate(as_point(x), float(f), refined=True, on_boundary=on_edge)


def posterior_moments(grid: PosteriorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance by trapezoid quadrature."""
    dens = grid.density * grid.weights
    mass = dens.sum()
    mesh = np.meshgrid(*grid.axes, indexing="ij")
    mean = np.array([np.sum(dens * m) / mass for m in mesh])
    p = grid.dim
    cov = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            cov[i, j] = cov[j, i] = np.sum(dens * (mesh[i] - mean[i]) * (mesh[j] - mean[j])) / mass
    _require_pd(cov, "posterior covariance")
    return mean, cov


def _require_pd(m: np.ndarray, what: str) -> None:
    try:
        np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        raise DegeneratePosteriorError(
            f"{what} is not positive definite (grid too coarse or mass on the boundary)"
        ) from None


@dataclass(frozen=True)
class PosteriorInformation:
    """Information-matrix estimates read off the posterior shape.

    ``matrix`` is ``Omega^-1 / t`` with ``Omega`` the moment-matched posterior
    covariance.  ``mode_centered`` uses second moments about the MAP instead
    of the mean.  ``shortcut`` is ``2 pi p_t(map)^2 / t`` and only exists
    for scalar parameters.
    """

    matrix: np.ndarray
    mode_centered: np.ndarray
    omega: np.ndarray
    shortcut: float | None = None


def info_from_posterior(grid: PosteriorGrid, map_est: MapEstimate, t: float | None = None) -> PosteriorInformation:
    t = grid.t if t is None else float(t)
    mean, omega = posterior_moments(grid)
    dens = grid.density * grid.weights
    mesh = np.meshgrid(*grid.axes, indexing="ij")
    c = map_est.point
    p = grid.dim
    omega_mode = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            omega_mode[i, j] = np.sum(dens * (mesh[i] - c[i]) * (mesh[j] - c[j])) / dens.sum()
    try:
        info = np.linalg.inv(omega) / t
        info_mode = np.linalg.inv(omega_mode) / t
    except np.linalg.LinAlgError:
        raise InferenceError("posterior covariance is singular") from None
    shortcut = None
    if p == 1:
        # -t * objective is the unnormalised log posterior at the mode
        log_p_mode = -t * map_est.objective - grid.log_norm_const
        shortcut = 2 * math.pi * math.exp(2 * log_p_mode) / t
    return PosteriorInformation(_frozen(0.5 * (info + info.T)), _frozen(0.5 * (info_mode + info_mode.T)),
                                _frozen(omega), shortcut)


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def replicate(fn: Callable[[int, int], object], reps: int, master_seed: int, threads: int = 1) -> list:
    """Run ``fn(index, seed)`` for each replication, results in index order.

    Seeds depend only on ``(master_seed, index)`` so the output does not
    depend on ``threads``.
    """
    seeds = [derive_seed(master_seed, i) for i in range(reps)]

    def run(i: int):
        try:
            return fn(i, seeds[i])
        except Exception as exc:  # noqa: BLE001 - re-raised with the index
            raise ReplicationError(i, exc) from exc

    if threads <= 1 or reps <= 1:
        return [run(i) for i in range(reps)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(reps)))


def mc_derivative_samples(
    problem: ContrastProblem,
    at,
    reps: int,
    master_seed: int,
    threads: int = 1,
    hessians: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Gradients (and Hessians) of the contrast at ``at`` over fresh datasets."""
    if reps < 2:
        raise ValueError("need at least 2 replications")
    if problem.resimulate is None:
        raise ValueError("problem has no resimulation hook")
    at = as_point(at)

    def one(i: int, seed: int):
        sim = problem.resimulate(at, seed)
        g = sim.grad(at)
        h = sim.hess(at) if hessians else None
        return g, h

    out = replicate(one, reps, master_seed, threads)
    grads = np.array([g for g, _ in out])
    hess = np.array([h for _, h in out]) if hessians else None
    return grads, hess


def mc_estimate_gamma(problem: ContrastProblem, at, reps: int, master_seed: int, threads: int = 1) -> np.ndarray:
    """``t`` times the sample covariance of simulated gradients at ``at``."""
    grads, _ = mc_derivative_samples(problem, at, reps, master_seed, threads, hessians=False)
    return _gamma_from_grads(grads, problem.t)


def mc_estimate_info(problem: ContrastProblem, at, reps: int, master_seed: int, threads: int = 1) -> np.ndarray:
    """Sample mean of simulated Hessians at ``at``."""
    _, hess = mc_derivative_samples(problem, at, reps, master_seed, threads)
    return _frozen(hess.mean(axis=0))


def mc_estimate_sandwich(problem: ContrastProblem, at, reps: int, master_seed: int, threads: int = 1):
    """``(gamma, info)`` from one shared set of simulated datasets."""
    grads, hess = mc_derivative_samples(problem, at, reps, master_seed, threads)
    return _gamma_from_grads(grads, problem.t), _frozen(hess.mean(axis=0))


def _gamma_from_grads(grads: np.ndarray, t: float) -> np.ndarray:
    cov = np.atleast_2d(np.cov(grads, rowvar=False, ddof=1))
    return _frozen(t * cov)


def _symmetrize_psd(m: np.ndarray, what: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    m = 0.5 * (m + m.T)
    if not np.all(np.isfinite(m)):
        raise InferenceError(f"{what} has non-finite entries")
    eig = np.linalg.eigvalsh(m)
    if eig.min() < -1e-8 * max(np.trace(m), 0.0):
        raise InferenceError(f"{what} is not positive semi-definite (min eigenvalue {eig.min():.3g})")
    return m


@dataclass(frozen=True)
class LimitDistribution:
    """Gaussian approximation ``N(mean, covariance)`` of the estimator."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = as_point(self.mean)
        cov = _symmetrize_psd(self.covariance, "limit covariance")
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match the mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", _frozen(cov))


def limit_distribution(map_est, info, gamma, t: float) -> LimitDistribution:
    """Sandwich limit law ``N(map, I^-1 Gamma I^-1 / t)``."""
    point = map_est.point if isinstance(map_est, MapEstimate) else map_est
    info = np.atleast_2d(np.asarray(info, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if np.linalg.cond(info) > 1e14:
        raise InferenceError("information matrix is singular")
    inv = np.linalg.inv(info)
    return LimitDistribution(point, inv @ gamma @ inv.T / t)


@dataclass(frozen=True)
class ConfidenceRegion:
    center: np.ndarray
    intervals: np.ndarray
    shape: np.ndarray
    radius2: float
    level: float

    def contains(self, point) -> bool:
        """Membership in the ellipsoid ``(x - c)' S^-1 (x - c) <= radius2``."""
        d = np.asarray(point, dtype=float) - self.center
        q = d @ np.linalg.pinv(self.shape) @ d
        return bool(q <= self.radius2)

    def covers(self, axis: int, value: float) -> bool:
        lo, hi = self.intervals[axis]
        return bool(lo <= value <= hi)


def confidence_region(dist: LimitDistribution, level: float = 0.95) -> ConfidenceRegion:
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    z = stats.norm.ppf((1 + level) / 2)
    half = z * np.sqrt(np.clip(np.diag(dist.covariance), 0, None))
    intervals = np.stack([dist.mean - half, dist.mean + half], axis=-1)
    r2 = float(stats.chi2.ppf(level, df=dist.mean.size))
    return ConfidenceRegion(dist.mean, _frozen(intervals), dist.covariance, r2, level)


def _fn(problem_or_fn):
    return problem_or_fn.value if isinstance(problem_or_fn, ContrastProblem) else problem_or_fn


def _steps(at: np.ndarray, rel: float, floor: float) -> np.ndarray:
    return np.maximum(rel * np.abs(at), floor)


def _eval(f, x) -> float:
    v = float(f(x))
    if not math.isfinite(v):
        raise ContrastEvaluationError(f"non-finite contrast {v} on the difference stencil", x)
    return v


def finite_difference_gradient(problem, at, step: float = 1e-5, floor: float = 1e-7) -> np.ndarray:
    """Central-difference gradient with step ``max(step * |x_i|, floor)``."""
    f = _fn(problem)
    at = np.asarray(at, dtype=float).reshape(-1)
    h = _steps(at, step, floor)
    g = np.empty_like(at)
    for i in range(at.size):
        e = np.zeros_like(at)
        e[i] = h[i]
        g[i] = (_eval(f, at + e) - _eval(f, at - e)) / (2 * h[i])
    return g


def finite_difference_hessian(problem, at, step: float = 1e-4, floor: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian, symmetrised.

    Second differences lose about half the working precision to cancellation,
    hence the larger default step than for the gradient.
    """
    f = _fn(problem)
    at = np.asarray(at, dtype=float).reshape(-1)
    h = _steps(at, step, floor)
    p = at.size
    f0 = _eval(f, at)
    out = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        out[i, i] = (_eval(f, at + ei) - 2 * f0 + _eval(f, at - ei)) / h[i] ** 2
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = h[j]
            v = (_eval(f, at + ei + ej) - _eval(f, at + ei - ej)
                 - _eval(f, at - ei + ej) + _eval(f, at - ei - ej)) / (4 * h[i] * h[j])
            out[i, j] = out[j, i] = v
    return out
