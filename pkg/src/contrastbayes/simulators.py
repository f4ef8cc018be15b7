"""Seeded generators for the three spatial data types.

* centred Gaussian random fields on a square lattice with covariance
  ``exp(-theta * h)`` (semivariogram ``1 - exp(-theta * h)``), exact
  simulation through a dense Cholesky factor;
* two-state autologistic Markov fields by systematic-scan Gibbs sampling;
* autosimilar surfaces: sums of cylinders ``r * 1{|x - M| < r}`` placed by a
  marked Poisson process with intensity ``alpha * exp(-beta * r)``.

Every function takes an explicit seed and draws from its own
``numpy.random.Generator``; identical arguments give bit-identical output.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

MAX_GRF_NODES = 10_000
MAX_CYLINDERS = 10_000_000
DEFAULT_BURN_IN = 500


class SimulationError(RuntimeError):
    pass


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LatticeField:
    """Values on an ``n x n`` grid with inter-node distance ``spacing``."""

    values: np.ndarray
    spacing: float = 1.0
    binary: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"field must be square, got shape {v.shape}")
        if self.binary:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("binary field may only contain 0 and 1")
            v = _frozen(v, np.int8)
        else:
            if not np.all(np.isfinite(v)):
                raise ValueError("field contains non-finite values")
            v = _frozen(v, float)
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@functools.lru_cache(maxsize=16)
def _lattice_distances(n: int, spacing: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    xy = np.stack([ii.ravel(), jj.ravel()], axis=-1) * spacing
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    d.setflags(write=False)
    return d


@functools.lru_cache(maxsize=64)
def _grf_cholesky(n: int, theta: float, spacing: float) -> np.ndarray:
    cov = np.exp(-theta * _lattice_distances(n, spacing))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(cov + 1e-10 * np.eye(n * n))
        except np.linalg.LinAlgError:
            raise SimulationError(f"covariance not positive definite for n={n}, theta={theta}") from None
    chol.setflags(write=False)
    return chol


def simulate_grf_exponential(n: int, theta: float, seed: int, spacing: float = 1.0) -> LatticeField:
    """Unit-variance Gaussian field with covariance ``exp(-theta h)``."""
    if n < 1 or n * n > MAX_GRF_NODES:
        raise ValueError(f"grid side n={n} outside 1..{int(math.isqrt(MAX_GRF_NODES))}")
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    chol = _grf_cholesky(int(n), float(theta), float(spacing))
    z = np.random.default_rng(seed).standard_normal(n * n)
    return LatticeField((chol @ z).reshape(n, n), spacing)


@numba.njit(cache=True, nogil=True)
def _gibbs_sweeps(x, u, prob):
    n = x.shape[0]
    for s in range(u.shape[0]):
        for i in range(n):
            for j in range(n):
                nb = 0
                if i > 0:
                    nb += x[i - 1, j]
                if i < n - 1:
                    nb += x[i + 1, j]
                if j > 0:
                    nb += x[i, j - 1]
                if j < n - 1:
                    nb += x[i, j + 1]
                x[i, j] = 1 if u[s, i, j] < prob[nb] else 0


def simulate_markov_field(
    n: int,
    theta1: float,
    theta2: float,
    sweeps: int = DEFAULT_BURN_IN,
    seed: int = 0,
) -> LatticeField:
    """Autologistic field after ``sweeps`` raster-order Gibbs sweeps.

    Site ``i`` is set to one with probability ``logistic(theta1 + theta2 s_i)``
    where ``s_i`` sums the (up to four) existing nearest neighbours.  The
    chain starts from i.i.d. fair coin flips.
    """
    if abs(theta2) > 1:
        raise ValueError(f"|theta2| must be <= 1 for simulation, got {theta2}")
    if sweeps < 1:
        raise ValueError("need at least one sweep")
    if n < 1:
        raise ValueError("grid side must be positive")
    rng = np.random.default_rng(seed)
    x = (rng.random((n, n)) < 0.5).astype(np.int64)
    eta = theta1 + theta2 * np.arange(5)
    prob = 1.0 / (1.0 + np.exp(-eta))
    chunk = max(1, 200_000 // (n * n))
    done = 0
    while done < sweeps:
        k = min(chunk, sweeps - done)
        _gibbs_sweeps(x, rng.random((k, n, n)), prob)
        done += k
    return LatticeField(x, 1.0, binary=True)


@dataclass(frozen=True)
class CylinderProcess:
    """Cylinder centres and radii hitting ``window = (xmin, ymin, xmax, ymax)``.

    ``buffer`` bounds the distance of every centre from the window.
    """

    centers: np.ndarray
    radii: np.ndarray
    window: tuple[float, float, float, float]
    buffer: float

    def __post_init__(self):
        c = _frozen(np.asarray(self.centers, dtype=float).reshape(-1, 2))
        r = _frozen(np.asarray(self.radii, dtype=float).reshape(-1))
        if c.shape[0] != r.shape[0]:
            raise ValueError("centres and radii differ in length")
        if np.any(r <= 0):
            raise ValueError("radii must be positive")
        x0, y0, x1, y1 = (float(v) for v in self.window)
        if not (x1 > x0 and y1 > y0):
            raise ValueError("window must have positive width and height")
        b = float(self.buffer)
        if c.size and (np.any(c[:, 0] < x0 - b) or np.any(c[:, 0] > x1 + b)
                       or np.any(c[:, 1] < y0 - b) or np.any(c[:, 1] > y1 + b)):
            raise ValueError("centres must lie inside the buffered window")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "window", (x0, y0, x1, y1))
        object.__setattr__(self, "buffer", b)

    def __len__(self) -> int:
        return self.radii.size


def expected_cylinder_count(window, alpha: float, beta: float) -> float:
    """Mean number of cylinders ``(x, r)`` with ``dist(x, window) < r``.

    Integrates ``alpha exp(-beta r)`` against the area of the window dilated
    by a disc of radius ``r``: ``W H + 2 (W + H) r + pi r^2``.
    """
    x0, y0, x1, y1 = window
    w, h = x1 - x0, y1 - y0
    return alpha * (w * h / beta + 2 * (w + h) / beta**2 + 2 * math.pi / beta**3)


def simulate_cylinder_surface(window, alpha: float, beta: float, seed: int) -> CylinderProcess:
    """All cylinders of the marked Poisson process that reach into ``window``.

    Radii are drawn from their exact hitting law (a mixture of Gamma(1..3,
    beta) with weights from the dilated-window area), then centres uniformly
    on the window dilated by each radius.  Nothing is truncated, so moments
    of the surface inside the window are free of border effects.
    """
    if alpha < 0 or not beta > 0:
        raise ValueError("need alpha >= 0 and beta > 0")
    x0, y0, x1, y1 = (float(v) for v in window)
    w, h = x1 - x0, y1 - y0
    if alpha == 0:
        return CylinderProcess(np.empty((0, 2)), np.empty(0), (x0, y0, x1, y1), 0.0)
    mean_count = expected_cylinder_count((x0, y0, x1, y1), alpha, beta)
    if mean_count > MAX_CYLINDERS:
        raise SimulationError(f"expected {mean_count:.3g} cylinders exceeds the limit {MAX_CYLINDERS:.0e}")
    rng = np.random.default_rng(seed)
    count = rng.poisson(mean_count)
    weights = np.array([w * h / beta, 2 * (w + h) / beta**2, 2 * math.pi / beta**3])
    shape = 1 + rng.choice(3, size=count, p=weights / weights.sum())
    radii = rng.gamma(shape, 1.0 / beta)
    centers = np.empty((count, 2))
    todo = np.arange(count)
    while todo.size:
        r = radii[todo]
        u = rng.random((todo.size, 2))
        cx = x0 - r + u[:, 0] * (w + 2 * r)
        cy = y0 - r + u[:, 1] * (h + 2 * r)
        dx = np.maximum(np.maximum(x0 - cx, cx - x1), 0.0)
        dy = np.maximum(np.maximum(y0 - cy, cy - y1), 0.0)
        ok = dx * dx + dy * dy < r * r
        centers[todo[ok], 0] = cx[ok]
        centers[todo[ok], 1] = cy[ok]
        todo = todo[~ok]
    buffer = float(radii.max()) if count else 0.0
    return CylinderProcess(centers, radii, (x0, y0, x1, y1), buffer)


def evaluate_surface(process: CylinderProcess, points) -> np.ndarray:
    """Surface height ``sum r 1{|center - M| < r}`` at each point ``M``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(pts.shape[0])
    if len(process) == 0:
        return out
    tree = cKDTree(process.centers)
    rmax = float(process.radii.max())
    for k, nbrs in enumerate(tree.query_ball_point(pts, rmax)):
        if nbrs:
            idx = np.asarray(nbrs)
            d2 = ((process.centers[idx] - pts[k]) ** 2).sum(-1)
            r = process.radii[idx]
            out[k] = r[d2 < r * r].sum()
    return out


def transect_heights(process: CylinderProcess, x_start: float, y: float, npts: int, spacing: float) -> np.ndarray:
    """Heights at ``(x_start + k * spacing, y)`` for ``k < npts``.

    Each cylinder covers a contiguous run of sample indices on a horizontal
    line, so the sum is accumulated with a difference array.
    """
    out = np.zeros(npts + 1)
    if len(process) == 0:
        return out[:-1]
    dy = process.centers[:, 1] - y
    r = process.radii
    hit = np.abs(dy) < r
    r = r[hit]
    half = np.sqrt(r * r - dy[hit] ** 2)
    cx = process.centers[hit, 0]
    lo = np.floor((cx - half - x_start) / spacing).astype(np.int64) + 1
    hi = np.ceil((cx + half - x_start) / spacing).astype(np.int64) - 1
    lo = np.clip(lo, 0, npts)
    hi = np.clip(hi, -1, npts - 1)
    keep = hi >= lo
    out += np.bincount(lo[keep], weights=r[keep], minlength=npts + 1)
    out -= np.bincount(hi[keep] + 1, weights=r[keep], minlength=npts + 1)
    # cancelling +r/-r pairs can leave round-off below zero
    return np.maximum(np.cumsum(out)[:-1], 0.0)


@dataclass(frozen=True)
class SurfaceSample:
    """Height vectors (mm) sampled every ``spacing`` mm along transects."""

    transects: tuple[np.ndarray, ...]
    spacing: float

    def __post_init__(self):
        ts = tuple(_frozen(np.asarray(t, dtype=float).reshape(-1)) for t in self.transects)
        if not ts:
            raise ValueError("sample needs at least one transect")
        if any(t.size < 2 for t in ts):
            raise ValueError("every transect needs at least two heights")
        if any(not np.all(np.isfinite(t)) for t in ts):
            raise ValueError("heights must be finite")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "transects", ts)

    @property
    def nu_A(self) -> float:
        """Total sampled length."""
        return float(sum(t.size - 1 for t in self.transects) * self.spacing)


def sample_transects(
    process: CylinderProcess,
    count: int = 12,
    length_mm: float = 1180.0,
    spacing_mm: float = 2.0,
    seed: int = 0,
) -> SurfaceSample:
    """Horizontal transects at independent uniform positions in the window."""
    x0, y0, x1, y1 = process.window
    if length_mm > x1 - x0:
        raise ValueError(f"window width {x1 - x0} is shorter than the transect length {length_mm}")
    if count < 1 or not spacing_mm > 0:
        raise ValueError("need count >= 1 and positive spacing")
    npts = int(math.floor(length_mm / spacing_mm + 1e-9)) + 1
    rng = np.random.default_rng(seed)
    starts = x0 + rng.random(count) * (x1 - x0 - length_mm)
    ys = y0 + rng.random(count) * (y1 - y0)
    return SurfaceSample(
        tuple(transect_heights(process, xs, yv, npts, spacing_mm) for xs, yv in zip(starts, ys)),
        float(spacing_mm),
    )
