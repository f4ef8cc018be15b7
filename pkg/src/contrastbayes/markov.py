"""Pseudo-likelihood fit of the two-state autologistic field.

Only interior sites, those with all four neighbours on the grid, enter the
contrast; with ``m = (n-2)^2`` of them the posterior exponent uses ``t = m``.
Because the conditional law depends on a site only through its value and its
neighbour sum, the contrast is a function of the 2 x 5 table of counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import ContrastProblem, ParamBox, Prior
from .simulators import DEFAULT_BURN_IN, LatticeField, simulate_markov_field

PRIOR_BOUND = 1.5
SIM_BOUND = 1.0


@dataclass(frozen=True)
class AutologisticParams:
    theta1: float
    theta2: float

    def __post_init__(self):
        if not (math.isfinite(self.theta1) and math.isfinite(self.theta2)):
            raise ValueError("parameters must be finite")
        if abs(self.theta2) > PRIOR_BOUND:
            raise ValueError(f"|theta2| must be <= {PRIOR_BOUND}, got {self.theta2}")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])


def _theta(params) -> np.ndarray:
    if isinstance(params, AutologisticParams):
        return params.as_array()
    return np.asarray(params, dtype=float)


def _logistic(eta):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(eta, dtype=float)))


def conditional_prob(x, neighbor_sum, params):
    """``P(X_i = x | s_i)`` for the logistic full conditional; stable for large logits."""
    th = _theta(params)
    p1 = _logistic(th[..., 0] + th[..., 1] * np.asarray(neighbor_sum))
    return np.where(np.asarray(x) == 1, p1, 1.0 - p1)


def _check_field(fld: LatticeField) -> np.ndarray:
    if not fld.binary:
        raise ValueError("pseudo-likelihood needs a binary field")
    if fld.n < 3:
        raise ValueError("grid needs n >= 3 to have interior sites")
    return np.asarray(fld.values, dtype=np.int64)


def neighbor_sums(fld: LatticeField) -> np.ndarray:
    """Four-neighbour sums at interior sites, shape ``(n-2, n-2)``."""
    x = _check_field(fld)
    return x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:]


def interior_counts(fld: LatticeField) -> np.ndarray:
    """``N[x, s]``: number of interior sites with value x and neighbour sum s."""
    x = _check_field(fld)[1:-1, 1:-1].ravel()
    s = neighbor_sums(fld).ravel()
    return np.bincount(5 * x + s, minlength=10).reshape(2, 5)


def _contrast_from_counts(counts: np.ndarray, theta) -> np.ndarray:
    th = np.atleast_2d(np.asarray(theta, dtype=float))
    m = counts.sum()
    eta = th[:, :1] + th[:, 1:2] * np.arange(5)
    # -log P(1|s) = log(1 + e^-eta), -log P(0|s) = log(1 + e^eta)
    nll = counts[1] * np.logaddexp(0.0, -eta) + counts[0] * np.logaddexp(0.0, eta)
    return nll.sum(axis=1) / m


def _gradient_from_counts(counts: np.ndarray, theta) -> np.ndarray:
    th = _theta(theta)
    s = np.arange(5)
    p = _logistic(th[0] + th[1] * s)
    # sum of Z_i grouped by (x, s): (x - p)(1, s)
    resid = counts[1] * (1 - p) - counts[0] * p
    return -np.array([resid.sum(), (resid * s).sum()]) / counts.sum()


def _hessian_from_counts(counts: np.ndarray, theta) -> np.ndarray:
    th = _theta(theta)
    s = np.arange(5)
    p = _logistic(th[0] + th[1] * s)
    w = counts.sum(axis=0) * p * (1 - p)
    return np.array([[w.sum(), (w * s).sum()], [(w * s).sum(), (w * s * s).sum()]]) / counts.sum()


def pseudolik_contrast(fld: LatticeField, params) -> float:
    """``-(1/m) sum_interior log P(X_i | s_i)``."""
    return float(_contrast_from_counts(interior_counts(fld), _theta(params))[0])


def score_vector(fld: LatticeField, params, site: tuple[int, int]) -> np.ndarray:
    """``Z_i = (X_i - P(1|s_i)) (1, s_i)`` at an interior site ``(row, col)``."""
    x = _check_field(fld)
    i, j = site
    n = fld.n
    if not (0 < i < n - 1 and 0 < j < n - 1):
        raise ValueError(f"site {site} is not interior")
    s = x[i - 1, j] + x[i + 1, j] + x[i, j - 1] + x[i, j + 1]
    th = _theta(params)
    p = float(_logistic(th[0] + th[1] * s))
    return (x[i, j] - p) * np.array([1.0, float(s)])


def pseudolik_gradient(fld: LatticeField, params) -> np.ndarray:
    return _gradient_from_counts(interior_counts(fld), params)


def pseudolik_hessian(fld: LatticeField, params) -> np.ndarray:
    return _hessian_from_counts(interior_counts(fld), params)


def markov_problem(fld: LatticeField, sweeps: int = DEFAULT_BURN_IN) -> ContrastProblem:
    """Contrast problem in ``(theta1, theta2)``; resimulation runs the Gibbs sampler."""
    counts = interior_counts(fld)
    return _problem(counts, fld.n, sweeps)


def _problem(counts: np.ndarray, n: int, sweeps: int) -> ContrastProblem:
    def resimulate(at, seed):
        sim = simulate_markov_field(n, float(at[0]), float(at[1]), sweeps, seed)
        return _problem(interior_counts(sim), n, sweeps)

    return ContrastProblem(
        t=float(counts.sum()),
        value=lambda a: float(_contrast_from_counts(counts, a)[0]),
        gradient=lambda a: _gradient_from_counts(counts, a),
        hessian=lambda a: _hessian_from_counts(counts, a),
        resimulate=resimulate,
        batch_value=lambda pts: _contrast_from_counts(counts, pts),
    )


def default_prior() -> Prior:
    return core.uniform_prior(ParamBox([-PRIOR_BOUND, -PRIOR_BOUND], [PRIOR_BOUND, PRIOR_BOUND]))


@dataclass(frozen=True)
class MarkovConfig:
    grid_nodes: int = 101
    gamma_reps: int = 1000
    sweeps: int = DEFAULT_BURN_IN
    level: float = 0.95
    master_seed: int = 0
    threads: int = 1
    warn_boundary: bool = True


@dataclass(frozen=True)
class MarkovReport:
    grid: core.PosteriorGrid = field(repr=False)
    map: core.MapEstimate
    gamma_mc: np.ndarray
    info_mc: np.ndarray
    info_post: core.PosteriorInformation
    limit_mc: core.LimitDistribution
    limit_post: core.LimitDistribution
    region_mc: core.ConfidenceRegion
    region_post: core.ConfidenceRegion
    counts: np.ndarray = field(repr=False)


def run_markov_fit(fld: LatticeField, prior: Prior | None = None,
                   config: MarkovConfig = MarkovConfig()) -> MarkovReport:
    """Posterior grid, MAP, simulated Gamma and I at the MAP, and 95% ellipses.

    The Monte-Carlo route uses the mean simulated Hessian for ``I``; the
    posterior route uses ``Omega^-1 / m`` from the moment-matched posterior.
    Both share the simulated Gamma.  Resimulation needs ``|theta2| <= 1`` at
    the MAP.
    """
    prior = default_prior() if prior is None else prior
    counts = interior_counts(fld)
    problem = _problem(counts, fld.n, config.sweeps)
    t = problem.t
    grid = core.evaluate_cb_posterior(problem, prior, core.grid_axes(prior.support, config.grid_nodes))
    est = core.map_estimate(problem, prior, warn=config.warn_boundary)
    post = core.info_from_posterior(grid, est, t)
    gamma, info = core.mc_estimate_sandwich(problem, est.point, config.gamma_reps,
                                            config.master_seed, config.threads)
    lim_mc = core.limit_distribution(est, info, gamma, t)
    lim_post = core.limit_distribution(est, post.matrix, gamma, t)
    return MarkovReport(grid, est, gamma, info, post, lim_mc, lim_post,
                        core.confidence_region(lim_mc, config.level),
                        core.confidence_region(lim_post, config.level), counts)


@dataclass(frozen=True)
class MarkovCoverageRecord:
    index: int
    seed: int
    map: tuple[float, float]
    var1: float
    var2: float
    covered_mc: bool
    covered_post: bool
    error: str = ""


@dataclass(frozen=True)
class MarkovCoverageResult:
    theta_true: tuple[float, float]
    records: tuple[MarkovCoverageRecord, ...]

    @property
    def successes(self) -> list[MarkovCoverageRecord]:
        return [r for r in self.records if not r.error]

    @property
    def failures(self) -> int:
        return len(self.records) - len(self.successes)

    @property
    def hits_mc(self) -> int:
        return sum(r.covered_mc for r in self.successes)

    @property
    def hits_post(self) -> int:
        return sum(r.covered_post for r in self.successes)

    @property
    def median_variances(self) -> tuple[float, float]:
        ok = self.successes
        return (float(np.median([r.var1 for r in ok])), float(np.median([r.var2 for r in ok])))


def coverage_experiment(
    theta_true=(0.0, 0.3),
    n: int = 20,
    outer_reps: int = 50,
    gamma_reps: int = 1000,
    master_seed: int = 0,
    threads: int = 1,
    level: float = 0.95,
    grid_nodes: int = 101,
    sweeps: int = DEFAULT_BURN_IN,
) -> MarkovCoverageResult:
    """Refit simulated fields and record whether the ellipses contain the truth.

    Seeds follow the variogram experiment: ``derive_seed(master_seed, 0, i)``
    for the field and ``derive_seed(master_seed, 1, i)`` for its Gamma/I
    datasets.  A failing replication (for instance a MAP with
    ``|theta2| > 1`` that cannot be resimulated) is recorded and counted.
    """
    if outer_reps < 1:
        raise ValueError("need at least one outer replication")
    truth = np.asarray(theta_true, dtype=float)

    def one(i: int, _seed: int) -> MarkovCoverageRecord:
        seed = core.derive_seed(master_seed, 0, i)
        try:
            fld = simulate_markov_field(n, truth[0], truth[1], sweeps, seed)
            cfg = MarkovConfig(grid_nodes, gamma_reps, sweeps, level,
                               core.derive_seed(master_seed, 1, i), 1, False)
            rep = run_markov_fit(fld, config=cfg)
        except Exception as exc:  # noqa: BLE001 - recorded per replication
            nan = float("nan")
            return MarkovCoverageRecord(i, seed, (nan, nan), nan, nan, False, False, repr(exc))
        cov = rep.limit_mc.covariance
        return MarkovCoverageRecord(i, seed, tuple(float(v) for v in rep.map.point),
                                    float(cov[0, 0]), float(cov[1, 1]),
                                    rep.region_mc.contains(truth), rep.region_post.contains(truth))

    return MarkovCoverageResult(tuple(float(v) for v in truth),
                                tuple(core.replicate(one, outer_reps, master_seed, threads)))
