"""Cylindrical functionals, step processes, Malliavin derivatives and the
Skorokhod integral on the grid.

Everything is expressed in the coordinates of the Brownian increments dW.
The derivative of a functional G is D_l G = dG/d(dW_l), so that

    G(omega + eps K h) - G(omega)  ~  eps * sum_l dt * D_l G * h_l  =  eps (DG, h)_2,

and the Skorokhod integral of a step process u over [0, t_m) is

    delta(u) = sum_{l < m} [ u_l dW_l - dt * D_l u_l ].

Gaussian integration by parts makes this the exact adjoint of D on the grid:
E[G delta(u)] = E[(DG, u)_2] for every cylindrical G, with no quadrature bias.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .fractional import GridError, TimeGrid

FD_STEP = 1e-6


def _check_anchors(anchors):
    anchors = tuple(float(a) for a in anchors)
    if any(not 0.0 < a <= 1.0 for a in anchors):
        raise ValueError(f"anchors must lie in (0, 1], got {anchors}")
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise ValueError(f"anchors must be strictly increasing, got {anchors}")
    return anchors


def anchor_indices(anchors, grid):
    """Node indices of ``anchors``; GridError if an anchor is not a node."""
    return np.array([grid.index_of(a) for a in anchors], dtype=np.int64)


def _fd_gradient(fn, x, step=FD_STEP):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = step
        out[..., i] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return out


@dataclass(frozen=True, eq=False)
class CylindricalFunctional:
    """G(omega) = g(omega_{a_1}, ..., omega_{a_k}) for anchors a_1 < ... < a_k.

    ``g`` maps an array (..., k) to (...) and ``grad_g`` maps (..., k) to
    (..., k).  Without ``grad_g`` a central finite difference is used and
    every derived quantity is flagged oracle-grade.  ``bound`` is sup |g| and
    ``grad_bound`` is sup of the l1 norm of grad g.
    """

    anchors: tuple
    g: object
    grad_g: object = None
    bound: float = math.inf
    grad_bound: float = math.inf
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "anchors", _check_anchors(self.anchors))

    @property
    def k(self):
        return len(self.anchors)

    @property
    def oracle_grade(self):
        return self.grad_g is None and self.k > 0

    def value(self, x):
        return np.asarray(self.g(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.k == 0:
            return np.zeros(x.shape)
        if self.grad_g is None:
            return _fd_gradient(self.g, x)
        return np.asarray(self.grad_g(x), dtype=float)

    def coordinates(self, path):
        """Path values at the anchors, shape batch + (k,)."""
        return path.values[..., anchor_indices(self.anchors, path.grid)]

    def __call__(self, path):
        return eval_functional(self, path)


def constant_functional(c):
    c = float(c)
    return CylindricalFunctional(
        (), lambda x: np.full(np.shape(x)[:-1], c), lambda x: np.zeros(np.shape(x)),
        abs(c), 0.0, f"const:{c!r}")


def compose(outer, outer_grad, parts, name=""):
    """g(G_1, ..., G_p) as a new cylindrical functional on the union of anchors."""
    anchors = tuple(sorted(set().union(*(p.anchors for p in parts))))
    slots = [[anchors.index(a) for a in p.anchors] for p in parts]

    def inner(x):
        return np.stack([p.value(x[..., s]) for p, s in zip(parts, slots)], axis=-1)

    def g(x):
        return outer(inner(x))

    def grad(x):
        dout = outer_grad(inner(x))
        out = np.zeros(np.shape(x))
        for j, (p, s) in enumerate(zip(parts, slots)):
            if s:
                out[..., s] += dout[..., j:j + 1] * p.gradient(x[..., s])
        return out

    return CylindricalFunctional(anchors, g, grad, name=name or "composite")


@dataclass(frozen=True, eq=False)
class StepProcess:
    """u_t(omega) = g(t, omega_{a_1}, ..., omega_{a_k}), constant on each grid cell.

    ``g(t, x)`` takes times of shape (m,) and coordinates (..., m, k) and
    returns (..., m); ``grad_g`` returns (..., m, k).  On cell l the process
    is evaluated at the cell midpoint.  ``dt_g`` (optional) is the partial
    time derivative, used only for temporal-derivative diagnostics.
    """

    anchors: tuple
    g: object
    grad_g: object = None
    bound: float = math.inf
    grad_bound: float = math.inf
    name: str = ""
    dt_g: object = None

    def __post_init__(self):
        object.__setattr__(self, "anchors", _check_anchors(self.anchors))

    @property
    def k(self):
        return len(self.anchors)

    @property
    def deterministic(self):
        return self.k == 0

    @property
    def oracle_grade(self):
        return self.grad_g is None and self.k > 0

    @property
    def c_sigma(self):
        """max(sup |g|, sup |grad g|_1); bounds both the process and its derivative norm."""
        return max(self.bound, self.grad_bound)

    def values(self, t, x):
        t = np.asarray(t, dtype=float)
        return np.asarray(self.g(t, np.asarray(x, dtype=float)), dtype=float) \
            * np.ones(np.shape(x)[:-1])

    def gradients(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.k == 0:
            return np.zeros(x.shape)
        if self.grad_g is None:
            t = np.asarray(t, dtype=float)
            return _fd_gradient(lambda y: self.g(t, y), x)
        return np.asarray(self.grad_g(np.asarray(t, dtype=float), x), dtype=float)

    def time_derivative(self, t, x):
        if self.dt_g is None:
            raise ValueError(f"step process {self.name!r} has no time derivative")
        return np.asarray(self.dt_g(np.asarray(t, dtype=float), np.asarray(x, dtype=float)),
                          dtype=float) * np.ones(np.shape(x)[:-1])

    def cell(self, ell, grid):
        """The cylindrical functional F_l giving u on cell ``ell``."""
        t = np.array([grid.midpoints[ell]])
        return CylindricalFunctional(
            self.anchors,
            lambda x: self.values(t, x[..., None, :])[..., 0],
            lambda x: self.gradients(t, x[..., None, :])[..., 0, :],
            self.bound, self.grad_bound, f"{self.name}[{ell}]")

    def on_path(self, path):
        """Cell values u_l(omega), shape batch + (n,)."""
        x = _cell_coordinates(self, path)
        return self.values(path.grid.midpoints, x)

    @classmethod
    def from_functional(cls, functional, profile=None, dprofile=None, name=""):
        """u_t = p(t) F; with no profile the process is F on every cell."""
        p = profile or (lambda t: np.ones_like(t))
        dp = dprofile or (lambda t: np.zeros_like(t))

        def g(t, x):
            return p(t) * functional.value(x)

        def grad(t, x):
            return p(t)[:, None] * functional.gradient(x)

        def dt_g(t, x):
            return dp(t) * functional.value(x)

        scale = 1.0 if profile is None else float(np.max(np.abs(p(np.linspace(0, 1, 1025)))))
        return cls(functional.anchors, g, None if functional.grad_g is None else grad,
                   scale * functional.bound, scale * functional.grad_bound,
                   name or functional.name, dt_g)


def zero_process():
    return StepProcess((), lambda t, x: np.zeros(np.shape(x)[:-1]),
                       lambda t, x: np.zeros(np.shape(x)), 0.0, 0.0, "zero",
                       lambda t, x: np.zeros(np.shape(x)[:-1]))


def deterministic_process(h, name="deterministic"):
    """Step process with the fixed cell values ``h`` (length n)."""
    h = np.asarray(h, dtype=float)

    def g(t, x):
        if np.shape(t)[-1] != h.size:
            raise GridError(f"process has {h.size} cells, grid asks for {np.shape(t)[-1]}")
        return np.broadcast_to(h, np.shape(x)[:-1])

    return StepProcess((), g, lambda t, x: np.zeros(np.shape(x)),
                       float(np.max(np.abs(h), initial=0.0)), 0.0, name)


def _cell_coordinates(u, path):
    idx = anchor_indices(u.anchors, path.grid)
    x = path.values[..., idx]
    return np.broadcast_to(x[..., None, :], x.shape[:-1] + (path.grid.n, u.k))


@dataclass(frozen=True, eq=False)
class DerivativeField:
    """D_s F on the grid cells (shape batch + (n,)) or D_s u_t (batch + (n_s, n_t))."""

    grid: TimeGrid
    values: np.ndarray
    oracle_grade: bool = False

    def pair(self, h):
        """(D F, h)_2 = sum_l dt D_l F h_l; ``h`` broadcasts against the batch."""
        return np.sum(self.values * np.asarray(h, dtype=float), axis=-1) * self.grid.dt

    def l2_norm(self):
        return np.sqrt(np.sum(self.values ** 2, axis=-1) * self.grid.dt)


@dataclass(frozen=True)
class SobolevEstimate:
    """Monte Carlo Sobolev norms of a step process.

    ``norm_12`` estimates ||u||_{1,2} = (E int u^2 + E int int (D_s u_t)^2)^(1/2);
    ``norm_1inf`` is the sample-sup analogue (int max(|u_t|_inf, ||D u_t|_2|_inf)^2)^(1/2).
    ``se_12`` is the standard error of ``norm_12_sq``.
    """

    norm_12: float
    norm_1inf: float
    norm_12_sq: float
    se_12: float
    samples: int


def eval_functional(G, path):
    return G.value(G.coordinates(path))


def kernel_rows(weights, anchors):
    """K(a_i, .) per cell for each anchor, shape (k, n)."""
    return weights.density[anchor_indices(anchors, weights.grid)]


def derivative_field(F, path, weights=None):
    """D F for a cylindrical functional, or the matrix D_s u_t for a step process."""
    weights = weights or path.require_weights()
    rows = kernel_rows(weights, F.anchors)
    if isinstance(F, StepProcess):
        x = _cell_coordinates(F, path)
        grads = F.gradients(path.grid.midpoints, x)
        # D_s u_t = sum_i d_i g_t * K(a_i, s)
        vals = np.einsum("...ti,is->...st", grads, rows)
        return DerivativeField(path.grid, vals, F.oracle_grade)
    grads = F.gradient(F.coordinates(path))
    if F.k == 0:
        vals = np.zeros(np.shape(path.values)[:-1] + (path.grid.n,))
    else:
        vals = grads @ rows
    return DerivativeField(path.grid, vals, F.oracle_grade)


def directional_derivative(G, path, h, weights=None):
    return derivative_field(G, path, weights).pair(h)


def finite_difference_directional(G, path, h, eps=1e-4, weights=None):
    """(G(omega + eps K h) - G(omega)) / eps, the oracle for the pairing (DG, h)_2."""
    weights = weights or path.require_weights()
    shift = np.asarray(h, dtype=float) @ weights.matrix.T
    idx = anchor_indices(G.anchors, path.grid)
    base = G.coordinates(path)
    return (G.value(base + eps * shift[idx]) - G.value(base)) / eps


def cell_derivative_diagonal(u, path, weights=None):
    """D_l u_l for every cell l, the term subtracted in the Skorokhod sum."""
    weights = weights or path.require_weights()
    rows = kernel_rows(weights, u.anchors)
    if u.k == 0:
        return np.zeros(np.shape(path.values)[:-1] + (path.grid.n,))
    grads = u.gradients(path.grid.midpoints, _cell_coordinates(u, path))
    return np.einsum("...li,il->...l", grads, rows)


def skorokhod_sum(values, diagonal, dW, dt, m):
    """sum_{l < m} [u_l dW_l - dt D_l u_l] from precomputed cell data."""
    return np.sum(values[..., :m] * dW[..., :m], axis=-1) - dt * np.sum(diagonal[..., :m], axis=-1)


def skorokhod_integral(u, path, t=1.0, weights=None):
    """delta(1_[0,t] u) on the path's own increments; t must be a grid node."""
    if path.increments is None:
        raise ValueError("Skorokhod integral needs the path's increments; "
                         "regenerate the oracle path with increments")
    m = path.grid.index_of(t)
    vals = u.on_path(path)
    diag = cell_derivative_diagonal(u, path, weights)
    return skorokhod_sum(vals, diag, path.dW, path.grid.dt, m)


def sobolev_samples(u, paths, weights=None):
    """Per-path int u^2 dt + int int (D_s u_t)^2 ds dt, whose mean is ||u||_{1,2}^2."""
    dt = paths.grid.dt
    sq = np.sum(u.on_path(paths) ** 2, axis=-1) * dt
    if u.k:
        D = derivative_field(u, paths, weights).values
        sq = sq + np.sum(D ** 2, axis=(-2, -1)) * dt * dt
    return np.broadcast_to(sq, np.shape(paths.values)[:-1]).reshape(-1)


def sobolev_norms(u, paths, weights=None):
    vals = u.on_path(paths)
    n = paths.grid.n
    dt = paths.grid.dt
    vals = vals.reshape(-1, n)
    if vals.shape[0] < 1:
        raise ValueError("need at least one path")
    if u.k:
        D = derivative_field(u, paths, weights).values.reshape(-1, n, n)
    else:
        D = np.zeros((vals.shape[0], n, n))
    per_path = np.sum(vals ** 2, axis=-1) * dt + np.sum(D ** 2, axis=(-2, -1)) * dt * dt
    sq = float(np.mean(per_path))
    se = float(np.std(per_path, ddof=1) / math.sqrt(per_path.size)) if per_path.size > 1 else 0.0
    sup_u = np.max(np.abs(vals), axis=0)
    sup_d = np.max(np.sqrt(np.sum(D ** 2, axis=-2) * dt), axis=0)
    inf_norm = math.sqrt(float(np.sum(np.maximum(sup_u, sup_d) ** 2) * dt))
    return SobolevEstimate(math.sqrt(sq), inf_norm, sq, se, int(per_path.size))
