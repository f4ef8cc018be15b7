"""Least-squares fit of an exponential variogram range parameter.

The sample semivariogram is computed at every distinct lattice distance
shorter than the half diagonal, and the contrast is half the sum of squared
gaps to the model ``1 - exp(-alpha h)``.  The posterior exponent uses
``t = n^2``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import ContrastProblem, ParamBox, Prior
from .simulators import LatticeField, simulate_grf_exponential

DEFAULT_BOX = (0.0, 4.0)


@dataclass(frozen=True)
class EmpiricalVariogram:
    lags: np.ndarray
    gamma_hat: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        lags = np.asarray(self.lags, dtype=float)
        g = np.asarray(self.gamma_hat, dtype=float)
        c = np.asarray(self.counts, dtype=np.int64)
        if not (lags.shape == g.shape == c.shape) or lags.size == 0:
            raise ValueError("variogram needs equally long, non-empty lag/value/count arrays")
        if np.any(np.diff(lags) <= 0) or np.any(g < 0) or np.any(c < 1):
            raise ValueError("lags must increase strictly, values be >= 0 and counts >= 1")
        for name, a in (("lags", lags), ("gamma_hat", g), ("counts", c)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def _squared_lags(n: int) -> np.ndarray:
    a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    d2 = (a * a + b * b).ravel()
    # strict comparison with the half diagonal, in integers: 2 d2 < (n-1)^2
    return np.unique(d2[(d2 > 0) & (2 * d2 < (n - 1) ** 2)])


def lag_classes(n: int, spacing: float = 1.0) -> np.ndarray:
    """Distinct inter-node distances below the half diagonal of an n x n grid."""
    if n < 2:
        raise ValueError("grid needs n >= 2")
    return np.sqrt(_squared_lags(n)) * spacing


@functools.lru_cache(maxsize=32)
def _offsets_by_class(n: int, squared: tuple[int, ...]) -> tuple[tuple[tuple[int, int], ...], ...]:
    # each unordered pair is counted once: a > 0, or a == 0 and b > 0
    out = []
    for d2 in squared:
        offs = []
        for a in range(0, n):
            for b in range(-(n - 1), n):
                if a * a + b * b == d2 and (a > 0 or b > 0):
                    offs.append((a, b))
        out.append(tuple(offs))
    return tuple(out)


def sample_variogram(field: LatticeField, lags=None) -> EmpiricalVariogram:
    """Semivariogram ``1/(2 n_l) sum (X_i - X_j)^2`` by exact pair enumeration."""
    n = field.n
    if lags is None:
        lags = lag_classes(n, field.spacing)
    lags = np.asarray(lags, dtype=float)
    if lags.size == 0:
        raise ValueError("no lag classes: the grid is too small")
    squared = tuple(int(round(v)) for v in (lags / field.spacing) ** 2)
    x = np.asarray(field.values, dtype=float)
    sums = np.zeros(len(squared))
    counts = np.zeros(len(squared), dtype=np.int64)
    for k, offs in enumerate(_offsets_by_class(n, squared)):
        for a, b in offs:
            if b >= 0:
                d = x[a:, b:] - x[: n - a, : n - b]
            else:
                d = x[a:, : n + b] - x[: n - a, -b:]
            sums[k] += np.sum(d * d)
            counts[k] += d.size
    if np.any(counts == 0):
        raise ValueError("a lag class has no pairs on this grid")
    return EmpiricalVariogram(lags, sums / (2 * counts), counts)


def model_variogram(h, alpha):
    return 1.0 - np.exp(-np.multiply.outer(alpha, h))


def ls_contrast(vario: EmpiricalVariogram, alpha):
    """``U(alpha) = 1/2 sum_l (gamma_hat_l - (1 - exp(-alpha h_l)))^2``; vectorised in alpha."""
    r = vario.gamma_hat - model_variogram(vario.lags, alpha)
    return 0.5 * np.sum(r * r, axis=-1)


def ls_contrast_gradient(vario: EmpiricalVariogram, alpha):
    h = vario.lags
    e = np.exp(-np.multiply.outer(alpha, h))
    r = vario.gamma_hat - 1.0 + e
    return -np.sum(h * e * r, axis=-1)


def ls_contrast_hessian(vario: EmpiricalVariogram, alpha):
    # d2U = sum h^2 e (e + r); the residual enters with a plus sign
    h = vario.lags
    e = np.exp(-np.multiply.outer(alpha, h))
    r = vario.gamma_hat - 1.0 + e
    return np.sum(h * h * e * (e + r), axis=-1)


def variogram_problem(field: LatticeField, lags=None) -> ContrastProblem:
    """Contrast problem in one parameter, with resimulation at a given theta."""
    return _problem(sample_variogram(field, lags), field.n, field.spacing)


def _problem(vario: EmpiricalVariogram, n: int, spacing: float) -> ContrastProblem:
    def resimulate(at, seed):
        theta = float(at[0])
        return variogram_problem(simulate_grf_exponential(n, theta, seed, spacing), vario.lags)

    return ContrastProblem(
        t=float(n * n),
        value=lambda a: float(ls_contrast(vario, a[0])),
        gradient=lambda a: np.array([ls_contrast_gradient(vario, a[0])]),
        hessian=lambda a: np.array([[ls_contrast_hessian(vario, a[0])]]),
        resimulate=resimulate,
        batch_value=lambda pts: ls_contrast(vario, pts[:, 0]),
    )


@dataclass(frozen=True)
class VariogramConfig:
    grid_nodes: int = 401
    gamma_reps: int = 1000
    level: float = 0.95
    master_seed: int = 0
    threads: int = 1
    warn_boundary: bool = True


@dataclass(frozen=True)
class VariogramReport:
    grid: core.PosteriorGrid
    map: core.MapEstimate
    gamma_mc: float
    info_mc: float
    info_post: core.PosteriorInformation
    limit_mc: core.LimitDistribution
    limit_post: core.LimitDistribution
    ci_mc: tuple[float, float]
    ci_post: tuple[float, float]
    vario: EmpiricalVariogram = field(repr=False)

    @property
    def info_post_shortcut(self) -> float:
        return float(self.info_post.shortcut)


def default_prior() -> Prior:
    return core.uniform_prior(ParamBox([DEFAULT_BOX[0]], [DEFAULT_BOX[1]]))


def run_variogram_fit(field: LatticeField, prior: Prior | None = None,
                      config: VariogramConfig = VariogramConfig()) -> VariogramReport:
    """MAP, Monte-Carlo Gamma and I at the MAP, posterior I, and both CIs.

    The posterior route uses the scalar shortcut ``2 pi p_t(map)^2 / t`` for
    ``I``; the Monte-Carlo route averages simulated Hessians.  Both share the
    same simulated Gamma.
    """
    prior = default_prior() if prior is None else prior
    vario = sample_variogram(field)
    problem = _problem(vario, field.n, field.spacing)
    t = problem.t
    grid = core.evaluate_cb_posterior(problem, prior, core.grid_axes(prior.support, config.grid_nodes))
    est = core.map_estimate(problem, prior, warn=config.warn_boundary)
    post = core.info_from_posterior(grid, est, t)
    gamma, info = core.mc_estimate_sandwich(problem, est.point, config.gamma_reps,
                                            config.master_seed, config.threads)
    lim_mc = core.limit_distribution(est, info, gamma, t)
    lim_post = core.limit_distribution(est, [[post.shortcut]], gamma, t)
    ci_mc = tuple(core.confidence_region(lim_mc, config.level).intervals[0])
    ci_post = tuple(core.confidence_region(lim_post, config.level).intervals[0])
    return VariogramReport(grid, est, float(gamma[0, 0]), float(info[0, 0]), post,
                           lim_mc, lim_post, ci_mc, ci_post, vario)


@dataclass(frozen=True)
class CoverageRecord:
    index: int
    seed: int
    map: float
    ci_lo_mc: float
    ci_hi_mc: float
    covered_mc: bool
    ci_lo_post: float
    ci_hi_post: float
    covered_post: bool
    error: str = ""


@dataclass(frozen=True)
class CoverageResult:
    theta_true: float
    records: tuple[CoverageRecord, ...]

    @property
    def successes(self) -> list[CoverageRecord]:
        return [r for r in self.records if not r.error]

    @property
    def failures(self) -> int:
        return len(self.records) - len(self.successes)

    def _rate(self, attr: str) -> tuple[float, float]:
        ok = self.successes
        p = sum(getattr(r, attr) for r in ok) / len(ok)
        return p, math.sqrt(p * (1 - p) / len(ok))

    @property
    def rate_mc(self) -> float:
        return self._rate("covered_mc")[0]

    @property
    def rate_post(self) -> float:
        return self._rate("covered_post")[0]

    @property
    def se_mc(self) -> float:
        return self._rate("covered_mc")[1]

    @property
    def se_post(self) -> float:
        return self._rate("covered_post")[1]


class CoverageError(RuntimeError):
    pass


def interval_covers(lo: float, hi: float, value: float) -> bool:
    return bool(lo <= value <= hi)


def coverage_experiment(
    theta_true: float = 1.0,
    n: int = 20,
    outer_reps: int = 1000,
    gamma_reps: int = 1000,
    master_seed: int = 0,
    threads: int = 1,
    level: float = 0.95,
    grid_nodes: int = 401,
) -> CoverageResult:
    """Refit simulated fields and count how often the CIs contain the truth.

    Replication ``i`` simulates its field from ``derive_seed(master_seed, 0, i)``
    and its Gamma/I datasets from ``derive_seed(master_seed, 1, i)``.  A
    failed replication is recorded with its error message; more than 5%
    failures abort the experiment.
    """
    if outer_reps < 50:
        raise ValueError("coverage needs at least 50 outer replications")

    def one(i: int, _seed: int) -> CoverageRecord:
        seed = core.derive_seed(master_seed, 0, i)
        try:
            fld = simulate_grf_exponential(n, theta_true, seed)
            cfg = VariogramConfig(grid_nodes, gamma_reps, level, core.derive_seed(master_seed, 1, i), 1, False)
            rep = run_variogram_fit(fld, config=cfg)
        except Exception as exc:  # noqa: BLE001 - recorded per replication
            nan = float("nan")
            return CoverageRecord(i, seed, nan, nan, nan, False, nan, nan, False, repr(exc))
        lo_m, hi_m = rep.ci_mc
        lo_p, hi_p = rep.ci_post
        return CoverageRecord(i, seed, float(rep.map.point[0]), lo_m, hi_m, interval_covers(lo_m, hi_m, theta_true),
                              lo_p, hi_p, interval_covers(lo_p, hi_p, theta_true))

    records = tuple(core.replicate(one, outer_reps, master_seed, threads))
    result = CoverageResult(theta_true, records)
    if result.failures > 0.05 * outer_reps:
        raise CoverageError(f"{result.failures} of {outer_reps} replications failed")
    return result

