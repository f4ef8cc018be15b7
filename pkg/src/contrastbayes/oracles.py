"""Independent checks of the model formulas, derivatives and simulators.

Each oracle returns :class:`OracleResult` rows comparing a measured value
with an expected one under an explicit tolerance.  The simulation oracles
use fine sampling (0.05 mm) on thin windows because the variance formula is
a continuum limit; coarse sampling adds a discretisation bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import core, markov, roughness, variogram
from .simulators import simulate_grf_exponential, simulate_markov_field


@dataclass(frozen=True)
class OracleResult:
    oracle: str
    check: str
    measured: float
    expected: float
    tolerance: float
    passed: bool
    relative: bool = False

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        tol = "rtol" if self.relative else "tol"
        return (f"{mark} {self.oracle:<12} {self.check:<36} measured={self.measured:.6g} "
                f"expected={self.expected:.6g} {tol}={self.tolerance:.3g}")


def _abs(oracle, check, measured, expected, tol) -> OracleResult:
    measured, expected = float(measured), float(expected)
    return OracleResult(oracle, check, measured, expected, float(tol), bool(abs(measured - expected) <= tol))


def _rel(oracle, check, measured, expected, rtol) -> OracleResult:
    measured, expected = float(measured), float(expected)
    err = abs(measured - expected) / max(abs(expected), 1e-300)
    return OracleResult(oracle, check, measured, expected, float(rtol), bool(err <= rtol), relative=True)


# ---------------------------------------------------------------- kappa


def kappa_oracle() -> list[OracleResult]:
    a = roughness.kappa_adaptive()
    b = roughness.kappa_gauss_legendre()
    used = roughness.kappa_constant()
    return [
        _rel("kappa", "adaptive vs Gauss-Legendre", b, a, roughness.KAPPA_RTOL),
        _rel("kappa", "value in use vs recorded constant", used, roughness.KAPPA_REFERENCE, roughness.KAPPA_RTOL),
    ]


# ---------------------------------------------------------------- moments and V

FINE_DESIGN = roughness.TransectDesign(count=1, length_mm=2500.0, spacing_mm=0.05)
ORACLE_PARAMS = ((20.0, 3.0), (46.6, 3.28))


def simulate_moment_pairs(params, reps: int, design: roughness.TransectDesign, master_seed: int,
                          threads: int = 1) -> np.ndarray:
    """``(reps, 2)`` array of sample moments from independent surfaces."""

    def one(i: int, seed: int) -> np.ndarray:
        return roughness.sample_moments(roughness.simulate_sample(params, design, seed)).as_array()

    return np.array(core.replicate(one, reps, master_seed, threads))


def moment_checks(params, pairs: np.ndarray, nu: float, k: float = 3.0) -> list[OracleResult]:
    """Mean of the moment pairs against ``E`` and ``nu * cov`` against ``V``, each within ``k`` SE.

    Standard errors of the covariance entries come from the empirical
    spread of the centred cross products.
    """
    tag = f"({params[0]:g},{params[1]:g})"
    reps = pairs.shape[0]
    out = []
    mean = pairs.mean(axis=0)
    se = pairs.std(axis=0, ddof=1) / math.sqrt(reps)
    expected = roughness.expected_moments(params)
    for i, name in enumerate(("E1", "E2")):
        out.append(_abs("moments", f"{name} {tag}", mean[i], expected[i], k * se[i]))
    d = pairs - mean
    cov = nu * np.cov(pairs.T)
    v = roughness.asymptotic_variance_V(params)
    for i, j, name in ((0, 0, "V11"), (0, 1, "V12"), (1, 1, "V22")):
        prod = d[:, i] * d[:, j]
        se_ij = nu * prod.std(ddof=1) / math.sqrt(reps)
        out.append(_abs("variance", f"{name} {tag}", cov[i, j], v[i, j], k * se_ij))
    return out


def moment_oracle(reps: int = 400, design: roughness.TransectDesign = FINE_DESIGN, master_seed: int = 17,
                  threads: int = 1, params=ORACLE_PARAMS) -> list[OracleResult]:
    out = []
    for k, th in enumerate(params):
        pairs = simulate_moment_pairs(th, reps, design, core.derive_seed(master_seed, k), threads)
        out.extend(moment_checks(th, pairs, design.nu_A))
    return out


def gamma_info_oracle(params=(46.6, 3.28), reps: int = 2000, design: roughness.TransectDesign = FINE_DESIGN,
                      master_seed: int = 23, threads: int = 1, rtol: float = 0.15) -> list[OracleResult]:
    """Simulated Gamma of the WLS contrast against ``J' V^-1 J``, entrywise."""
    problem = roughness.roughness_problem(
        roughness.MomentPair(*roughness.expected_moments(params), design.nu_A), design)
    gamma = core.mc_estimate_gamma(problem, params, reps, master_seed, threads)
    info = roughness.info_matrix_moments(params)
    return [_rel("gamma_info", f"Gamma[{i},{j}] vs J'V^-1J", gamma[i, j], info[i, j], rtol)
            for i, j in ((0, 0), (0, 1), (1, 1))]


# ---------------------------------------------------------------- derivatives


def _derivative_rows(case: str, problem: core.ContrastProblem, points) -> list[OracleResult]:
    g_err = h_err = 0.0
    for p in points:
        g, gf = problem.grad(p), core.finite_difference_gradient(problem, p)
        h, hf = problem.hess(p), core.finite_difference_hessian(problem, p)
        g_err = max(g_err, float(np.max(np.abs(g - gf)) / max(np.max(np.abs(gf)), 1e-12)))
        h_err = max(h_err, float(np.max(np.abs(h - hf)) / max(np.max(np.abs(hf)), 1e-12)))
    return [OracleResult("derivatives", f"{case} gradient (max rel err)", g_err, 0.0, 1e-5, g_err < 1e-5),
            OracleResult("derivatives", f"{case} Hessian (max rel err)", h_err, 0.0, 1e-3, h_err < 1e-3)]


def derivative_points(seed: int = 0, count: int = 10) -> dict[str, np.ndarray]:
    """Random interior parameter points for each case."""
    rng = np.random.default_rng(seed)
    return {
        "variogram": rng.uniform(0.2, 3.0, size=(count, 1)),
        "markov": np.column_stack([rng.uniform(-1.2, 1.2, count), rng.uniform(-1.2, 1.2, count)]),
        "roughness": np.column_stack([rng.uniform(5, 90, count), rng.uniform(1.5, 4.5, count)]),
    }


def derivative_problems(seed: int = 0) -> dict[str, core.ContrastProblem]:
    grf = simulate_grf_exponential(20, 1.0, core.derive_seed(seed, 1))
    mrf = simulate_markov_field(20, 0.0, 0.3, seed=core.derive_seed(seed, 2))
    sample = roughness.simulate_sample((46.6, 3.28), roughness.TransectDesign(count=2), core.derive_seed(seed, 3))
    return {
        "variogram": variogram.variogram_problem(grf),
        "markov": markov.markov_problem(mrf),
        "roughness": roughness.roughness_problem(roughness.sample_moments(sample)),
    }


def derivative_oracle(seed: int = 0) -> list[OracleResult]:
    problems = derivative_problems(seed)
    points = derivative_points(seed)
    out = []
    for case, problem in problems.items():
        out.extend(_derivative_rows(case, problem, points[case]))
    jac = roughness.moments_jacobian((46.6, 3.28))
    fd = core.finite_difference_gradient
    num = np.column_stack([
        [fd(lambda p, k=k: float(roughness.expected_moments(p)[k]), (46.6, 3.28))[j] for k in range(2)]
        for j in range(2)])
    err = float(np.max(np.abs(jac - num) / np.abs(num)))
    out.append(OracleResult("derivatives", "moment Jacobian (max rel err)", err, 0.0, 1e-6, err < 1e-6))
    return out


# ---------------------------------------------------------------- simulators


def grf_oracle(theta: float = 1.0, n: int = 20, reps: int = 500, master_seed: int = 29) -> list[OracleResult]:
    """Sample covariance at lags 1, sqrt 2 and 2 and the marginal variance."""
    fields = np.array([simulate_grf_exponential(n, theta, core.derive_seed(master_seed, i)).values
                       for i in range(reps)])
    pairs = {
        "variance": (fields, fields),
        "lag 1": (fields[:, 1:, :], fields[:, :-1, :]),
        "lag sqrt2": (fields[:, 1:, 1:], fields[:, :-1, :-1]),
        "lag 2": (fields[:, 2:, :], fields[:, :-2, :]),
    }
    hs = {"variance": 0.0, "lag 1": 1.0, "lag sqrt2": math.sqrt(2), "lag 2": 2.0}
    out = []
    for name, (a, b) in pairs.items():
        # one value per field keeps replications independent
        per_field = (a * b).reshape(reps, -1).mean(axis=1)
        se = per_field.std(ddof=1) / math.sqrt(reps)
        out.append(_abs("grf", f"covariance {name}", per_field.mean(), math.exp(-theta * hs[name]), 3 * se))
    return out


def gibbs_oracle(theta=(0.0, 0.3), n: int = 40, reps: int = 50, master_seed: int = 31,
                 min_sites: int = 100) -> list[OracleResult]:
    """Conditional frequency of ones per interior neighbour sum against the logistic law."""
    counts = np.zeros((2, 5))
    for i in range(reps):
        counts += markov.interior_counts(simulate_markov_field(n, theta[0], theta[1],
                                                               seed=core.derive_seed(master_seed, i)))
    out = []
    for s in range(5):
        tot = counts[:, s].sum()
        if tot < min_sites:
            continue
        p = float(markov.conditional_prob(1, s, theta))
        # sites within a field are dependent, so the binomial SE is a floor
        se = math.sqrt(p * (1 - p) / tot)
        out.append(_abs("gibbs", f"P(1 | s={s})", counts[1, s] / tot, p, 3 * se))
    return out


ORACLES: dict[str, Callable[[int], list[OracleResult]]] = {
    "kappa": lambda threads: kappa_oracle(),
    "moments": lambda threads: moment_oracle(threads=threads),
    "gamma_info": lambda threads: gamma_info_oracle(threads=threads),
    "derivatives": lambda threads: derivative_oracle(),
    "grf": lambda threads: grf_oracle(),
    "gibbs": lambda threads: gibbs_oracle(),
}


def run_oracles(names=None, threads: int = 1) -> list[OracleResult]:
    names = list(ORACLES) if not names else list(names)
    unknown = [n for n in names if n not in ORACLES]
    if unknown:
        raise KeyError(f"unknown oracle(s): {', '.join(unknown)}; choose from {', '.join(ORACLES)}")
    out = []
    for name in names:
        out.extend(ORACLES[name](threads))
    return out
