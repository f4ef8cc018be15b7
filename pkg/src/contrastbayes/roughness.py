"""Moment-based fit of the autosimilar cylinder surface.

The surface is the sum of heights of cylinders ``r 1{|x - M| < r}`` from a
marked Poisson process with intensity ``alpha exp(-beta r)``.  The data enter
only through the first two moments of the heights along the transects; the
contrast is a weighted least-squares distance between those and their
expectations, weighted by the inverse of the asymptotic variance ``V``.

All moment and variance entries are sums of monomials ``c alpha^a beta^b``,
which makes exact derivatives of any order straightforward.
"""

from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.ndimage import correlate1d
from scipy.special import roots_legendre

from . import core
from .core import ContrastProblem, ParamBox, Prior
from .simulators import SurfaceSample, sample_transects, simulate_cylinder_surface

KAPPA_ENV = "CONTRASTBAYES_KAPPA_OVERRIDE"
# cross-validated value of the double integral; see kappa_constant
KAPPA_REFERENCE = 4.6998249271e-4
KAPPA_RTOL = 1e-4

DEFAULT_BOX = ((1.0, 100.0), (1.0, 5.0))
DEFAULT_BANDWIDTH = 100.0
MIN_TRANSECT_POINTS = 10


class KappaError(RuntimeError):
    pass


# ---------------------------------------------------------------- kappa


def _phi(u):
    u = np.clip(u, 0.0, 1.0)
    return np.arccos(u) - u * np.sqrt(1.0 - u * u)


def kappa_gauss_legendre(nodes: int = 800) -> float:
    """Tensor Gauss-Legendre rule after ``u = s^2, v = t^2``.

    The substitution multiplies the integrand by ``4 s t`` and softens the
    corner singularity at the origin enough for a product rule.
    """
    x, w = roots_legendre(nodes)
    s = 0.5 * (x + 1.0)
    w = 0.5 * w
    u = s * s
    fu = 2.0 * s * _phi(u) * u**5
    # (uv)^5 / (u+v)^11, with the u^5 and v^5 factors folded into fu
    denom = (u[:, None] + u[None, :]) ** 11
    return float(w @ ((fu[:, None] * fu[None, :]) / denom) @ w)


def kappa_adaptive(epsabs: float = 0.0, epsrel: float = 1e-10) -> float:
    """Adaptive two-dimensional quadrature over ``v < u``, doubled by symmetry."""

    def f(v, u):
        return float(_phi(u) * _phi(v) * (u * v) ** 5 / (u + v) ** 11)

    val, _ = integrate.dblquad(f, 0.0, 1.0, 0.0, lambda u: u, epsabs=epsabs, epsrel=epsrel)
    return 2.0 * val


_kappa_lock = threading.Lock()
_kappa_value: float | None = None


def kappa_constant() -> float:
    """The variance constant ``kappa``, computed once per process.

    Two independent quadratures must agree to ``KAPPA_RTOL``; the adaptive
    value is returned.  The environment variable ``CONTRASTBAYES_KAPPA_OVERRIDE``
    replaces the value and exists only to inject faults into validation runs.
    """
    global _kappa_value
    override = os.environ.get(KAPPA_ENV)
    if override:
        return float(override)
    with _kappa_lock:
        if _kappa_value is None:
            a = kappa_adaptive()
            b = kappa_gauss_legendre()
            if abs(a - b) > KAPPA_RTOL * abs(a):
                raise KappaError(f"kappa quadratures disagree: adaptive {a!r}, Gauss-Legendre {b!r}")
            _kappa_value = a
        return _kappa_value


# ---------------------------------------------------------------- monomials


def _falling(a: int, k: int) -> float:
    out = 1.0
    for i in range(k):
        out *= a - i
    return out


def _poly(terms, alpha, beta, da: int = 0, db: int = 0):
    """Evaluate ``d^(da+db) / dalpha^da dbeta^db`` of ``sum c alpha^a beta^b``."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    out = np.zeros(np.broadcast(alpha, beta).shape)
    for c, a, b in terms:
        k = c * _falling(a, da) * _falling(b, db)
        if k != 0.0:
            out = out + k * alpha ** (a - da) * beta ** (b - db)
    return out


_E1 = ((6 * math.pi, 1, -4),)
_E2 = ((36 * math.pi**2, 2, -8), (24 * math.pi, 1, -5))


def _v_terms(kappa: float):
    f5, f6, f7, f10 = 120.0, 720.0, 5040.0, 3628800.0
    v11 = ((f5 * 16 / 3, 1, -6),)
    v12 = ((f6 * 16 / 3, 1, -7), (f5 * 64 * math.pi, 2, -10))
    v22 = ((f7 * 16 / 3, 1, -8),
           (f6 * 128 * math.pi + f10 * 32 * kappa, 2, -11),
           (6 * f5 * 128 * math.pi**2, 3, -14))
    return v11, v12, v22


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class RoughnessParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got ({self.alpha}, {self.beta})")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta])


@dataclass(frozen=True)
class MomentPair:
    """Pooled mean height ``m1``, mean squared height ``m2`` and total length ``nu_A`` (mm)."""

    m1: float
    m2: float
    nu_A: float

    def __post_init__(self):
        if not self.nu_A > 0:
            raise ValueError("nu_A must be positive")
        if self.m2 < self.m1**2 - 1e-9 * max(1.0, abs(self.m2)):
            raise ValueError(f"m2 = {self.m2} is below m1^2 = {self.m1 ** 2}")

    def as_array(self) -> np.ndarray:
        return np.array([self.m1, self.m2])


def _ab(params):
    if isinstance(params, RoughnessParams):
        return params.alpha, params.beta
    p = np.asarray(params, dtype=float)
    return p[..., 0], p[..., 1]


# ---------------------------------------------------------------- data


def load_transects(path) -> tuple[np.ndarray, ...]:
    """Raw heights from a transect manifest (JSON) or a single transect file."""
    from . import io

    path = Path(path)
    if path.suffix.lower() == ".json":
        return io.read_transect_manifest(path)[0]
    return (io.read_transect_file(path),)


def detrend_kernel(heights, spacing: float, bandwidth: float = DEFAULT_BANDWIDTH) -> np.ndarray:
    """Subtract a Gaussian Nadaraya-Watson trend and add back the mean.

    The kernel is truncated at six bandwidths, which changes weights by less
    than ``1e-8``.
    """
    y = np.asarray(heights, dtype=float).reshape(-1)
    if y.size < MIN_TRANSECT_POINTS:
        raise ValueError(f"a transect needs at least {MIN_TRANSECT_POINTS} points, got {y.size}")
    if not (spacing > 0 and bandwidth > spacing):
        raise ValueError("need spacing > 0 and bandwidth > spacing")
    half = int(math.ceil(6 * bandwidth / spacing))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) * spacing / bandwidth) ** 2)
    num = correlate1d(y, k, mode="constant", cval=0.0)
    den = correlate1d(np.ones_like(y), k, mode="constant", cval=0.0)
    return y - num / den + y.mean()


def sample_moments(sample: SurfaceSample) -> MomentPair:
    h = np.concatenate(sample.transects)
    return MomentPair(float(h.mean()), float(np.mean(h * h)), sample.nu_A)


@dataclass(frozen=True)
class TransectDesign:
    """Sampling design for synthetic surfaces.

    Each transect is simulated on its own window of size
    ``length_mm x window_height``, so transects are independent, as they are
    when real transects lie far apart compared with the cylinder radii.
    """

    count: int = 12
    length_mm: float = 1180.0
    spacing_mm: float = 2.0
    window_height: float = 1.0

    def __post_init__(self):
        if self.count < 1 or not (self.length_mm > 0 and self.spacing_mm > 0 and self.window_height > 0):
            raise ValueError("transect design needs count >= 1 and positive lengths")

    @property
    def nu_A(self) -> float:
        return self.count * math.floor(self.length_mm / self.spacing_mm + 1e-9) * self.spacing_mm


def simulate_sample(params, design: TransectDesign, seed: int) -> SurfaceSample:
    alpha, beta = (float(v) for v in _ab(params))
    window = (0.0, 0.0, design.length_mm, design.window_height)
    out = []
    for k in range(design.count):
        proc = simulate_cylinder_surface(window, alpha, beta, core.derive_seed(seed, k, 0))
        out.extend(sample_transects(proc, 1, design.length_mm, design.spacing_mm,
                                    core.derive_seed(seed, k, 1)).transects)
    return SurfaceSample(tuple(out), design.spacing_mm)


# ---------------------------------------------------------------- model moments


def expected_moments(params) -> np.ndarray:
    """``(E1, E2) = (6 pi a / b^4, 36 pi^2 a^2 / b^8 + 24 pi a / b^5)``; last axis has length 2."""
    a, b = _ab(params)
    return np.stack([_poly(_E1, a, b), _poly(_E2, a, b)], axis=-1)


def moments_jacobian(params) -> np.ndarray:
    """``J[i, j] = dE_i / dtheta_j`` with ``theta = (alpha, beta)``."""
    a, b = _ab(params)
    return np.array([[_poly(_E1, a, b, 1, 0), _poly(_E1, a, b, 0, 1)],
                     [_poly(_E2, a, b, 1, 0), _poly(_E2, a, b, 0, 1)]], dtype=float)


def _v_entries(a, b, da: int = 0, db: int = 0, kappa: float | None = None):
    kappa = kappa_constant() if kappa is None else kappa
    return tuple(_poly(t, a, b, da, db) for t in _v_terms(kappa))


def asymptotic_variance_V(params, kappa: float | None = None) -> np.ndarray:
    """Limit of ``nu(A) var(mu_hat_A)``; raises if not positive definite for positive alpha."""
    a, b = _ab(params)
    v11, v12, v22 = (float(v) for v in _v_entries(a, b, kappa=kappa))
    v = np.array([[v11, v12], [v12, v22]])
    if float(a) > 0 and not (v11 > 0 and v11 * v22 - v12 * v12 > 0):
        raise core.InferenceError(f"V is not positive definite at alpha={float(a)}, beta={float(b)}")
    return v


def _v_matrix(a, b, da, db, kappa):
    v11, v12, v22 = (float(v) for v in _v_entries(a, b, da, db, kappa))
    return np.array([[v11, v12], [v12, v22]])


def info_matrix_moments(params, kappa: float | None = None) -> np.ndarray:
    """``J' V^-1 J``, equal to both I and Gamma for this contrast."""
    j = moments_jacobian(params)
    v = asymptotic_variance_V(params, kappa)
    out = j.T @ np.linalg.solve(v, j)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------- contrast


def _batch_contrast(m: np.ndarray, pts: np.ndarray, kappa: float) -> np.ndarray:
    a, b = pts[:, 0], pts[:, 1]
    r1 = m[0] - _poly(_E1, a, b)
    r2 = m[1] - _poly(_E2, a, b)
    v11, v12, v22 = _v_entries(a, b, kappa=kappa)
    det = v11 * v22 - v12 * v12
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 0.5 * (v22 * r1 * r1 - 2 * v12 * r1 * r2 + v11 * r2 * r2) / det
    return np.where((det > 0) & (v11 > 0), q, np.inf)


def wls_contrast(moments: MomentPair, params, kappa: float | None = None) -> float:
    """``(mu_hat - E)' V^-1 (mu_hat - E) / 2`` with ``V`` at ``params``."""
    kappa = kappa_constant() if kappa is None else kappa
    a, b = _ab(params)
    asymptotic_variance_V((float(a), float(b)), kappa)
    return float(_batch_contrast(moments.as_array(), np.array([[float(a), float(b)]]), kappa)[0])


def _derivative_parts(m: np.ndarray, theta, kappa: float):
    a, b = float(theta[0]), float(theta[1])
    r = m - expected_moments((a, b))
    # dr/dtheta_i = -dE/dtheta_i; second derivatives likewise
    ri = [-np.array([_poly(_E1, a, b, *d), _poly(_E2, a, b, *d)]) for d in ((1, 0), (0, 1))]
    rij = [[-np.array([_poly(_E1, a, b, *(np.add(di, dj))), _poly(_E2, a, b, *(np.add(di, dj)))])
            for dj in ((1, 0), (0, 1))] for di in ((1, 0), (0, 1))]
    w = np.linalg.inv(_v_matrix(a, b, 0, 0, kappa))
    vi = [_v_matrix(a, b, *d, kappa) for d in ((1, 0), (0, 1))]
    vij = [[_v_matrix(a, b, *(np.add(di, dj)), kappa) for dj in ((1, 0), (0, 1))] for di in ((1, 0), (0, 1))]
    return r, ri, rij, w, vi, vij


def wls_gradient(moments: MomentPair, params, kappa: float | None = None) -> np.ndarray:
    kappa = kappa_constant() if kappa is None else kappa
    r, ri, _, w, vi, _ = _derivative_parts(moments.as_array(), np.asarray(_ab(params), float), kappa)
    wi = [-w @ v @ w for v in vi]
    return np.array([ri[i] @ w @ r + 0.5 * r @ wi[i] @ r for i in range(2)])


def wls_hessian(moments: MomentPair, params, kappa: float | None = None) -> np.ndarray:
    kappa = kappa_constant() if kappa is None else kappa
    r, ri, rij, w, vi, vij = _derivative_parts(moments.as_array(), np.asarray(_ab(params), float), kappa)
    wi = [-w @ v @ w for v in vi]
    h = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            wij = w @ vi[j] @ w @ vi[i] @ w - w @ vij[i][j] @ w + w @ vi[i] @ w @ vi[j] @ w
            h[i, j] = (rij[i][j] @ w @ r + ri[i] @ wi[j] @ r + ri[i] @ w @ ri[j]
                       + ri[j] @ wi[i] @ r + 0.5 * r @ wij @ r)
    return 0.5 * (h + h.T)


def roughness_problem(moments: MomentPair, design: TransectDesign | None = None,
                      kappa: float | None = None) -> ContrastProblem:
    """WLS contrast with ``t = nu(A)``; resimulation follows ``design``."""
    kappa = kappa_constant() if kappa is None else kappa
    m = moments.as_array()

    def resimulate(at, seed):
        if design is None:
            raise core.InferenceError("no transect design given for resimulation")
        return roughness_problem(sample_moments(simulate_sample(at, design, seed)), design, kappa)

    return ContrastProblem(
        t=moments.nu_A,
        value=lambda p: float(_batch_contrast(m, np.atleast_2d(p), kappa)[0]),
        gradient=lambda p: wls_gradient(moments, p, kappa),
        hessian=lambda p: wls_hessian(moments, p, kappa),
        resimulate=resimulate,
        batch_value=lambda pts: _batch_contrast(m, pts, kappa),
    )


# ---------------------------------------------------------------- fit


def default_prior() -> Prior:
    (a0, a1), (b0, b1) = DEFAULT_BOX
    return core.uniform_prior(ParamBox([a0, b0], [a1, b1]))


@dataclass(frozen=True)
class RoughnessConfig:
    grid_nodes: int = 101
    refine_nodes: int = 101
    refine_sd: float = 6.0
    level: float = 0.95
    warn_boundary: bool = True


@dataclass(frozen=True)
class RoughnessReport:
    moments: MomentPair
    coarse: core.PosteriorGrid = field(repr=False)
    grid: core.PosteriorGrid = field(repr=False)
    map: core.MapEstimate
    intervals_post: np.ndarray
    info_model: np.ndarray
    info_post: core.PosteriorInformation
    limit: core.LimitDistribution
    region: core.ConfidenceRegion


def _refined_axes(coarse: core.PosteriorGrid, center: np.ndarray, support: ParamBox, nodes: int, k: float):
    mean, cov = core.posterior_moments(coarse)
    sd = np.sqrt(np.diag(cov))
    # never narrower than two coarse cells, never outside the support
    cell = np.array([ax[1] - ax[0] for ax in coarse.axes])
    half = np.maximum(k * sd, 2 * cell)
    lo = np.maximum(support.lower, np.minimum(center, mean) - half)
    hi = np.minimum(support.upper, np.maximum(center, mean) + half)
    return tuple(np.linspace(l, h, nodes) for l, h in zip(lo, hi))


def run_roughness_fit(data, prior: Prior | None = None,
                      config: RoughnessConfig = RoughnessConfig()) -> RoughnessReport:
    """Posterior on the prior box, refined around the MAP, with marginal CIs.

    ``data`` is a :class:`SurfaceSample` or a :class:`MomentPair`.  Since
    ``I = Gamma`` here, the posterior quantiles give the intervals directly;
    the model route ``N(map, (J' V^-1 J)^-1 / nu(A))`` is reported beside them.
    """
    prior = default_prior() if prior is None else prior
    moments = data if isinstance(data, MomentPair) else sample_moments(data)
    problem = roughness_problem(moments)
    coarse = core.evaluate_cb_posterior(problem, prior, core.grid_axes(prior.support, config.grid_nodes))
    est = core.map_estimate(problem, prior, warn=config.warn_boundary)
    axes = _refined_axes(coarse, est.point, prior.support, config.refine_nodes, config.refine_sd)
    grid = core.evaluate_cb_posterior(problem, prior, axes)
    intervals = np.array([grid.marginal_interval(i, config.level) for i in range(2)])
    info = info_matrix_moments(est.point)
    post = core.info_from_posterior(grid, est, moments.nu_A)
    lim = core.limit_distribution(est, info, info, moments.nu_A)
    return RoughnessReport(moments, coarse, grid, est, intervals, info, post, lim,
                           core.confidence_region(lim, config.level))


@dataclass(frozen=True)
class RoughnessCoverageResult:
    theta_true: tuple[float, float]
    covered_post: np.ndarray
    covered_model: np.ndarray
    maps: np.ndarray
    failures: int

    def rates(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-parameter coverage of the posterior and model intervals."""
        return self.covered_post.mean(axis=0), self.covered_model.mean(axis=0)


def coverage_experiment(theta_true=(46.6, 3.28), design: TransectDesign = TransectDesign(),
                        outer_reps: int = 100, master_seed: int = 0, threads: int = 1,
                        config: RoughnessConfig = RoughnessConfig(warn_boundary=False)) -> RoughnessCoverageResult:
    """Fit synthetic samples drawn at ``theta_true`` and count marginal CI hits."""
    if outer_reps < 1:
        raise ValueError("need at least one outer replication")
    truth = np.asarray(theta_true, dtype=float)

    def one(i: int, _seed: int):
        try:
            rep = run_roughness_fit(simulate_sample(truth, design, core.derive_seed(master_seed, 0, i)),
                                    config=config)
        except Exception:  # noqa: BLE001 - counted as a failure
            return None
        post = (rep.intervals_post[:, 0] <= truth) & (truth <= rep.intervals_post[:, 1])
        model = (rep.region.intervals[:, 0] <= truth) & (truth <= rep.region.intervals[:, 1])
        return post, model, rep.map.point

    out = core.replicate(one, outer_reps, master_seed, threads)
    ok = [o for o in out if o is not None]
    if not ok:
        raise core.InferenceError("every coverage replication failed")
    return RoughnessCoverageResult(tuple(truth), np.array([o[0] for o in ok]), np.array([o[1] for o in ok]),
                                   np.array([o[2] for o in ok]), len(out) - len(ok))
