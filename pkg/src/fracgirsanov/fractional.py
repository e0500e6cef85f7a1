"""Fractional Brownian motion on a uniform grid of [0, 1].

The Volterra kernel is

    K(t, s) = c_H (t - s)^(H - 1/2) 2F1(H - 1/2, 1/2 - H; H + 1/2; 1 - t/s),  s < t,

with c_H^2 = 2H Gamma(3/2 - H) / (Gamma(H + 1/2) Gamma(2 - 2H)), the constant
that makes  int_0^1 K(t, r) K(s, r) dr  equal the fBM covariance.  Paths are
built from per-cell kernel weights, so a path on n cells is a linear image of
n Brownian increments and the two never disagree.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import math
import os

import numpy as np
from scipy.linalg import solve_triangular

from ._accel import backend, njit
from .rng import Stream, normal_block
from .special import kernel_hyp_factor, kernel_hyp_factor_numpy

QUADRATURE_VERSION = 3
# Gauss-Legendre order for every quadrature piece, and the number of dyadic
# levels used to grade pieces toward the diagonal and toward s = 0.  Near the
# origin the kernel mixes two powers of s, so that side is graded deeper.
GAUSS_ORDER = 16
GRADED_LEVELS = 12
ORIGIN_LEVELS = 40
# Accuracy claims hold in this range; outside it results are still produced.
GUARANTEED_RANGE = (0.1, 0.9)


class GridError(ValueError):
    """A time is off-grid or two objects live on different grids."""


class QuadratureError(ArithmeticError):
    def __init__(self, i, j):
        self.cell = (i, j)
        super().__init__(f"kernel quadrature failed on row {i}, cell {j}")


class Hurst(float):
    """Hurst parameter, a float restricted to the open interval (0, 1)."""

    def __new__(cls, value):
        value = float(value)
        if not 0.0 < value < 1.0:
            raise ValueError(f"Hurst parameter must lie in (0, 1), got {value}")
        return super().__new__(cls, value)

    @property
    def guaranteed(self):
        lo, hi = GUARANTEED_RANGE
        return lo <= self <= hi


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i/n on [0, 1]; cells are indexed by their left node."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"grid needs a positive integer cell count, got {self.n}")

    @property
    def dt(self):
        return 1.0 / self.n

    @property
    def nodes(self):
        return np.arange(self.n + 1) / self.n

    @property
    def midpoints(self):
        return (np.arange(self.n) + 0.5) / self.n

    def index_of(self, t):
        """Node index of time ``t``; raises GridError when t is not a node."""
        x = float(t) * self.n
        i = int(round(x))
        if abs(x - i) > 1e-9 or not 0 <= i <= self.n:
            raise GridError(f"time {t} is not a node of the {self.n}-cell grid")
        return i


def kernel_constant(hurst):
    h = float(hurst)
    return math.sqrt(2.0 * h * math.gamma(1.5 - h) / (math.gamma(h + 0.5) * math.gamma(2.0 - 2.0 * h)))


def kernel_value(hurst, t, s):
    """K^H(t, s); zero for s >= t.  Raises ValueError at the singular point s = 0."""
    h = Hurst(hurst)
    t, s = float(t), float(s)
    if s <= 0.0 or t <= 0.0:
        raise ValueError("kernel is singular at the origin; need s > 0 and t > 0")
    if s >= t:
        return 0.0
    fac = kernel_hyp_factor(h, t, s) if backend() == "numba" else \
        float(kernel_hyp_factor_numpy(h, t, s))
    return kernel_constant(h) * (t - s) ** (h - 0.5) * fac


def covariance(hurst, s, t):
    """fBM covariance (s^2H + t^2H - |s - t|^2H) / 2."""
    h2 = 2.0 * float(hurst)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    out = 0.5 * (np.abs(s) ** h2 + np.abs(t) ** h2 - np.abs(s - t) ** h2)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# cell quadrature
#
# Every piece is Gauss-Legendre after a change of variables.  Near the diagonal
# K ~ (t - s)^(H - 1/2); near the origin K ~ s^(-|H - 1/2|).  Both are removed
# by a power substitution, and the first cell is additionally graded toward 0.
# ``power`` selects the integrand K (1) or K^2 (2).


@njit
def _k_from_gap(hurst, const, t, s, gap):
    # kernel value given s and the gap t - s computed without cancellation
    return const * gap ** (hurst - 0.5) * kernel_hyp_factor(hurst, t, s)


@njit
def _gauss_plain(hurst, const, t, a, b, xg, wg, power):
    half = 0.5 * (b - a)
    total = 0.0
    for k in range(xg.size):
        s = a + half * (xg[k] + 1.0)
        total += wg[k] * _k_from_gap(hurst, const, t, s, t - s) ** power
    return half * total


@njit
def _gauss_right_singular(hurst, const, t, a, xg, wg):
    # int_a^t K(t, s) ds with s = t - L u^p, p = 1/(H + 1/2); the power cancels
    length = t - a
    p = 1.0 / (hurst + 0.5)
    total = 0.0
    for k in range(xg.size):
        u = 0.5 * (xg[k] + 1.0)
        gap = length * u ** p
        total += 0.5 * wg[k] * kernel_hyp_factor(hurst, t, t - gap)
    return const * length ** (hurst + 0.5) * p * total


@njit
def _gauss_left_singular(hurst, const, t, b, xg, wg, power):
    # int_0^b K(t, s)^power ds with s = b u^p, p = 1/(1 - power |H - 1/2|)
    p = 1.0 / (1.0 - power * abs(hurst - 0.5))
    total = 0.0
    for k in range(xg.size):
        u = 0.5 * (xg[k] + 1.0)
        s = b * u ** p
        total += 0.5 * wg[k] * _k_from_gap(hurst, const, t, s, t - s) ** power * u ** (p - 1.0)
    return b * p * total


@njit
def _right_graded(hurst, const, t, a, xg, wg, levels):
    # int_a^t K(t, s) ds, dyadic pieces toward the diagonal
    length = t - a
    total = _gauss_right_singular(hurst, const, t, t - length * 0.5 ** levels, xg, wg)
    for lev in range(levels):
        lo = t - length * 0.5 ** lev
        hi = t - length * 0.5 ** (lev + 1)
        total += _gauss_plain(hurst, const, t, lo, hi, xg, wg, 1)
    return total


@njit
def _left_graded(hurst, const, t, b, xg, wg, levels, power):
    total = _gauss_left_singular(hurst, const, t, b * 0.5 ** levels, xg, wg, power)
    for lev in range(levels):
        total += _gauss_plain(hurst, const, t, b * 0.5 ** (lev + 1), b * 0.5 ** lev, xg, wg, power)
    return total


@njit
def _cell_weights_numba(hurst, const, n, xg, wg, levels, origin_levels, moment):
    dt = 1.0 / n
    w = np.zeros((n + 1, n))
    for i in range(1, n + 1):
        t = i * dt
        for j in range(i):
            a = j * dt
            b = (j + 1) * dt
            if j == 0 and i == 1:
                mid = 0.5 * b
                val = _left_graded(hurst, const, t, mid, xg, wg, origin_levels, 1) \
                    + _right_graded(hurst, const, t, mid, xg, wg, levels)
            elif j == 0:
                if moment:
                    val = math.sqrt(dt * _left_graded(hurst, const, t, b, xg, wg, origin_levels, 2))
                else:
                    val = _left_graded(hurst, const, t, b, xg, wg, origin_levels, 1)
            elif j == i - 1:
                val = _right_graded(hurst, const, t, a, xg, wg, levels)
            else:
                val = _gauss_plain(hurst, const, t, a, b, xg, wg, 1)
            w[i, j] = val
    return w


def _kernel_np(hurst, const, t, s):
    return const * (t - s) ** (hurst - 0.5) * kernel_hyp_factor_numpy(hurst, t, s)


def _pieces_plain(a, b, u, hw):
    """Nodes (m, q) and weights for plain Gauss on each [a_m, b_m]."""
    s = a[:, None] + (b - a)[:, None] * u[None, :]
    return s, (b - a)[:, None] * hw[None, :]


def _cell_weights_numpy(hurst, const, n, xg, wg, levels, origin_levels, moment):
    dt = 1.0 / n
    u = 0.5 * (xg + 1.0)
    hw = 0.5 * wg
    w = np.zeros((n + 1, n))
    rows, cols = np.tril_indices(n + 1, k=-1)
    t = rows * dt

    def plain(tt, a, b, power=1):
        s, q = _pieces_plain(a, b, u, hw)
        return (_kernel_np(hurst, const, tt[:, None], s) ** power * q).sum(axis=1)

    def right(tt, a):
        length = tt - a
        inner = length * 0.5 ** levels
        p = 1.0 / (hurst + 0.5)
        gap = inner[:, None] * u[None, :] ** p
        fac = kernel_hyp_factor_numpy(hurst, tt[:, None], tt[:, None] - gap)
        total = const * inner ** (hurst + 0.5) * p * (fac @ hw)
        for lev in range(levels):
            total = total + plain(tt, tt - length * 0.5 ** lev, tt - length * 0.5 ** (lev + 1))
        return total

    def left_graded(tt, b, power=1):
        p = 1.0 / (1.0 - power * abs(hurst - 0.5))
        bl = b * 0.5 ** origin_levels
        s = bl[:, None] * u[None, :] ** p
        k = _kernel_np(hurst, const, tt[:, None], s) ** power
        total = bl * p * ((k * u[None, :] ** (p - 1.0)) @ hw)
        for lev in range(origin_levels):
            total = total + plain(tt, b * 0.5 ** (lev + 1), b * 0.5 ** lev, power)
        return total

    inner = (cols > 0) & (cols < rows - 1)
    if inner.any():
        a = cols[inner] * dt
        w[rows[inner], cols[inner]] = plain(t[inner], a, a + dt)

    diag = (cols == rows - 1) & (cols > 0)
    if diag.any():
        w[rows[diag], cols[diag]] = right(t[diag], cols[diag] * dt)

    first = (cols == 0) & (rows > 1)
    if first.any():
        b = np.full(first.sum(), dt)
        if moment:
            w[rows[first], 0] = np.sqrt(dt * left_graded(t[first], b, 2))
        else:
            w[rows[first], 0] = left_graded(t[first], b)

    tt = np.array([dt])
    w[1, 0] = left_graded(tt, tt * 0.5)[0] + right(tt, tt * 0.5)[0]
    return w


def _match_row_variances(w, hurst):
    # put the missing variance of each row on its diagonal cell
    n = w.shape[1]
    dt = 1.0 / n
    t = np.arange(n + 1) / n
    head = np.cumsum(w * w, axis=1)
    for i in range(1, n + 1):
        rest = head[i, i - 2] / dt if i >= 2 else 0.0
        w[i, i - 1] = math.sqrt(dt * (t[i] ** (2.0 * hurst) - rest))
    return w


SCHEMES = ("moment", "cell")


@dataclass(frozen=True, eq=False)
class KernelWeights:
    """Kernel weights W on an (n+1) x n array; row i is K(t_i, .) integrated per cell.

    Row 0 (t = 0) is identically zero, and W[i, j] = 0 whenever j >= i.

    Two schemes are available.  ``"cell"`` stores the plain cell integrals
    int_{cell j} K(t_i, s) ds.  ``"moment"`` (the default) keeps those on
    interior cells, replaces the first cell by the root-mean-square value
    sqrt(dt int_{cell 0} K^2) and sets the diagonal cell so that
    sum_j W[i, j]^2 / dt = t_i^{2H} exactly.  Averaging a singular kernel over
    a cell throws away its within-cell variance; the moment scheme puts it
    back, which is what makes the discrete Gram matrix track the fBM
    covariance for H away from 1/2.
    """

    hurst: Hurst
    grid: TimeGrid
    matrix: np.ndarray = field(repr=False)
    version: int = QUADRATURE_VERSION
    scheme: str = "moment"

    @property
    def dt(self):
        return self.grid.dt

    @property
    def density(self):
        """W / dt, the grid version of K(t_i, .); paths are omega = density @ dW."""
        return self.matrix / self.grid.dt

    def gram(self):
        """Discrete covariance sum_j W[i, j] W[k, j] / dt over all node pairs."""
        return self.matrix @ self.matrix.T / self.grid.dt

    def save(self, path):
        np.savez(path, hurst=float(self.hurst), n=self.grid.n, version=self.version,
                 scheme=self.scheme, matrix=self.matrix)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            mat = np.array(data["matrix"])
            mat.setflags(write=False)
            return cls(Hurst(float(data["hurst"])), TimeGrid(int(data["n"])), mat,
                       int(data["version"]), str(data["scheme"]))


def _compute_cell_weights(hurst, n, method, scheme):
    xg, wg = np.polynomial.legendre.leggauss(GAUSS_ORDER)
    const = kernel_constant(hurst)
    moment = scheme == "moment"
    if float(hurst) == 0.5:
        return np.tril(np.full((n + 1, n), 1.0 / n), k=-1)
    if method == "numba":
        w = _cell_weights_numba(float(hurst), const, n, xg, wg, GRADED_LEVELS, ORIGIN_LEVELS, moment)
    else:
        w = _cell_weights_numpy(float(hurst), const, n, xg, wg, GRADED_LEVELS, ORIGIN_LEVELS, moment)
    bad = np.argwhere(~np.isfinite(w))
    if bad.size:
        raise QuadratureError(int(bad[0, 0]), int(bad[0, 1]))
    # triangularity is structural; make it exact regardless of round-off
    w = np.tril(w, k=-1)
    if moment:
        w = _match_row_variances(w, float(hurst))
    return w


@lru_cache(maxsize=32)
def _cached_cell_weights(hurst, n, method, scheme):
    w = _compute_cell_weights(hurst, n, method, scheme)
    w.setflags(write=False)
    return w


def kernel_cell_weights(hurst, grid, method=None, cache_dir=None, scheme="moment"):
    """Kernel weights for ``grid`` (see :class:`KernelWeights` for the schemes).

    ``method`` picks the backend ("numba" or "numpy"); by default the
    environment decides.  When ``cache_dir`` is given the matrix is read from
    or written to ``<cache_dir>/kw_H<H>_n<n>_<scheme>_v<version>.npz``.
    """
    h = Hurst(hurst)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown weight scheme {scheme!r}; choose from {SCHEMES}")
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(int(grid))
    method = method or backend()
    if cache_dir is not None:
        name = f"kw_H{float(h)!r}_n{grid.n}_{scheme}_v{QUADRATURE_VERSION}.npz"
        path = os.path.join(cache_dir, name)
        if os.path.exists(path):
            return KernelWeights.load(path)
        kw = KernelWeights(h, grid, _cached_cell_weights(float(h), grid.n, method, scheme),
                           scheme=scheme)
        os.makedirs(cache_dir, exist_ok=True)
        kw.save(path)
        return kw
    return KernelWeights(h, grid, _cached_cell_weights(float(h), grid.n, method, scheme),
                         scheme=scheme)


# ---------------------------------------------------------------------------
# paths


@dataclass(frozen=True, eq=False)
class Increments:
    """Brownian increments dW (shape (..., n)), each nominally N(0, dt)."""

    dW: np.ndarray
    stream_id: object = None

    def __len__(self):
        return self.dW.shape[-1]


@dataclass(frozen=True, eq=False)
class SamplePath:
    """Path values on the n + 1 nodes together with the increments driving them.

    Leading axes of ``values`` (and of ``increments.dW``) index independent
    paths, so one object can carry a whole Monte Carlo batch.  ``increments``
    is None only for oracle paths generated without a back-solve.  ``weights``
    records the kernel that links the two, when known.
    """

    grid: TimeGrid
    values: np.ndarray
    increments: Increments = None
    oracle_grade: bool = False
    weights: "KernelWeights" = field(default=None, repr=False)

    @property
    def dW(self):
        if self.increments is None:
            raise ValueError("path carries no underlying increments")
        return self.increments.dW

    @property
    def batch_shape(self):
        return self.values.shape[:-1]

    def __getitem__(self, idx):
        inc = None if self.increments is None else Increments(
            self.increments.dW[idx], self.increments.stream_id)
        return SamplePath(self.grid, self.values[idx], inc, self.oracle_grade, self.weights)

    def require_weights(self):
        if self.weights is None:
            raise ValueError("path does not record its kernel weights")
        return self.weights


def sample_increments(stream, grid):
    """n independent N(0, dt) increments drawn from ``stream``."""
    z = stream.generator().standard_normal(grid.n)
    return Increments(z * math.sqrt(grid.dt), stream.stream_id)


def sample_increment_batch(seed, tag, path_ids, grid):
    """Increments for many paths; row p equals sample_increments(Stream(seed, tag, p))."""
    path_ids = np.atleast_1d(np.asarray(path_ids, dtype=np.int64))
    z = normal_block(seed, tag, path_ids, grid.n)
    return Increments(z * math.sqrt(grid.dt), (seed, tag, path_ids))


def fbm_from_increments(weights, inc):
    """Path values omega_{t_i} = sum_j (W[i, j] / dt) dW[j]."""
    dW = np.asarray(inc.dW, dtype=float)
    if dW.shape[-1] != weights.grid.n:
        raise GridError(f"{dW.shape[-1]} increments for a {weights.grid.n}-cell grid")
    values = dW @ weights.density.T
    return SamplePath(weights.grid, values, inc, weights=weights)


def covariance_matrix(hurst, grid):
    """Covariance of the path at the interior nodes t_1, ..., t_n."""
    t = grid.nodes[1:]
    return covariance(hurst, t[:, None], t[None, :])


def _smallest_pivot(cov):
    a = np.array(cov, dtype=float)
    m = a.shape[0]
    low = np.zeros_like(a)
    pivots = []
    for j in range(m):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        pivots.append(d)
        if d <= 0:
            break
        low[j, j] = math.sqrt(d)
        low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return min(pivots)


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"covariance is not positive definite; smallest pivot {pivot:.3e}")


def cholesky_factor(hurst, grid):
    cov = covariance_matrix(hurst, grid)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise FactorizationError(_smallest_pivot(cov)) from None


def fbm_cholesky_oracle(hurst, grid, stream, weights=None, with_increments=True, normals=None):
    """Exact-covariance path from the Cholesky factor of the node covariance.

    ``stream`` may be a single Stream or a (seed, tag, path_ids) triple for a
    batch.  When ``with_increments`` is set the increments are recovered by a
    triangular back-solve through the kernel weights, so the path stays
    coherent, but they are not exactly i.i.d.; the path is flagged oracle-grade.
    ``normals`` overrides the random draws (used for fixed-input checks).
    """
    low = cholesky_factor(hurst, grid)
    if normals is None:
        if isinstance(stream, Stream):
            normals = stream.generator().standard_normal(grid.n)
            sid = stream.stream_id
        else:
            seed, tag, ids = stream
            normals = normal_block(seed, tag, ids, grid.n)
            sid = (seed, tag, np.asarray(ids))
    else:
        sid = None
    normals = np.asarray(normals, dtype=float)
    interior = normals @ low.T
    values = np.concatenate([np.zeros(interior.shape[:-1] + (1,)), interior], axis=-1)
    inc = None
    weights = weights or kernel_cell_weights(hurst, grid)
    if with_increments:
        sq = weights.density[1:]
        flat = interior.reshape(-1, grid.n).T
        dW = solve_triangular(sq, flat, lower=True).T.reshape(interior.shape)
        inc = Increments(dW, sid)
    return SamplePath(grid, values, inc, oracle_grade=True, weights=weights)


def apply_fractional_operator(weights, f):
    """(K f)(t_i) on the grid nodes.

    For an array of cell values f (..., n) this is sum_j (W[i, j] / dt) f_j dt,
    the same linear map that turns increments into paths.  A callable f is
    integrated against the exact kernel, int_0^{t_i} K(t_i, s) f(s) ds, with
    the singularity-adapted Gauss rules used for the weights.
    """
    if callable(f):
        return _operator_quadrature(weights.hurst, weights.grid, f)
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != weights.grid.n:
        raise GridError(f"function has {f.shape[-1]} cell values, grid has {weights.grid.n}")
    return f @ weights.matrix.T


def _operator_quadrature(hurst, grid, f):
    h = float(hurst)
    const = kernel_constant(h)
    xg, wg = np.polynomial.legendre.leggauss(GAUSS_ORDER)
    u = 0.5 * (xg + 1.0)
    hw = 0.5 * wg
    out = np.zeros(grid.n + 1)
    for i in range(1, grid.n + 1):
        t = grid.nodes[i]
        mid = 0.5 * t
        # [0, t/2]: graded toward the origin, singular substitution innermost
        p = 1.0 / (1.0 - abs(h - 0.5))
        bl = mid * 0.5 ** ORIGIN_LEVELS
        s = bl * u ** p
        total = bl * p * np.sum(hw * _kernel_np(h, const, t, s) * f(s) * u ** (p - 1.0))
        for lev in range(ORIGIN_LEVELS):
            a, b = mid * 0.5 ** (lev + 1), mid * 0.5 ** lev
            s = a + (b - a) * u
            total += (b - a) * np.sum(hw * _kernel_np(h, const, t, s) * f(s))
        # [t/2, t]: graded toward the diagonal, s = t - L u^q innermost
        q = 1.0 / (h + 0.5)
        inner = (t - mid) * 0.5 ** GRADED_LEVELS
        gap = inner * u ** q
        fac = kernel_hyp_factor_numpy(h, t, t - gap)
        total += const * inner ** (h + 0.5) * q * np.sum(hw * fac * f(t - gap))
        for lev in range(GRADED_LEVELS):
            a, b = t - (t - mid) * 0.5 ** lev, t - (t - mid) * 0.5 ** (lev + 1)
            s = a + (b - a) * u
            total += (b - a) * np.sum(hw * _kernel_np(h, const, t, s) * f(s))
        out[i] = total
    return out


def cameron_martin_norm(weights, f):
    """Cameron-Martin norm of K f, which is the L^2 norm of f by definition."""
    f = np.asarray(f, dtype=float)
    return np.sqrt(np.sum(f * f, axis=-1) * weights.grid.dt)
