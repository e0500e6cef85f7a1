"""Anticipating shift transformations of fractional Wiener space.

For a step process sigma the forward family is

    (T_t omega)_s = omega_s + sum_{r < t ^ s} W[s, r] sigma_r(T_{t_r} omega),

so T_t moves the increments to dW + dt * u on the cells below t, with
u_r = sigma_r(T_{t_r} omega).  The inverse family subtracts shifts evaluated
along A_{r,t} omega, which makes A_t = A_{0,t} the exact inverse of T_t on the
grid.  Both are found by Picard iteration.

The derivative kernels Phi[s, r] = D_s[sigma_r(T_r omega)] and
Psi[s, r] = D_s[sigma_r(A_{r,t} omega)] solve triangular linear Volterra
systems.  On the grid the Jacobian of T_t is I + dt Phi^T, whose determinant
factors exactly into prod (1 + dt a_ll); densities use this exact value, and
the double-integral closed form is kept alongside as a diagnostic.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from ._accel import backend, njit
from .fractional import Increments, SamplePath
from .malliavin import anchor_indices, kernel_rows, skorokhod_sum

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 60


class PicardError(ArithmeticError):
    """Picard iteration did not reach the tolerance; carries the residual trace."""

    def __init__(self, trace, tol):
        self.trace = np.asarray(trace)
        super().__init__(f"Picard iteration stalled at {self.trace[-1]:.3e} > tol {tol:.1e} "
                         f"after {self.trace.size} iterations")


class SingularStepError(ArithmeticError):
    """A diagonal pivot 1 + dt * b_qq of the inverse derivative system is not positive."""


# ---------------------------------------------------------------------------
# compiled kernels


@njit
def _sup_partial_numba(W, d, reverse):
    # max over paths, nodes s and cut points of |partial sums of W[s, r] d_r|
    B, n = d.shape
    best = 0.0
    for b in range(B):
        for s in range(1, W.shape[0]):
            acc = 0.0
            if reverse:
                for r in range(s - 1, -1, -1):
                    acc += W[s, r] * d[b, r]
                    if abs(acc) > best:
                        best = abs(acc)
            else:
                for r in range(s):
                    acc += W[s, r] * d[b, r]
                    if abs(acc) > best:
                        best = abs(acc)
    return best


def _sup_partial_numpy(W, d, reverse, chunk=256):
    best = 0.0
    for lo in range(0, d.shape[0], chunk):
        terms = W[None, 1:, :] * d[lo:lo + chunk, None, :]
        if reverse:
            terms = terms[..., ::-1]
        best = max(best, float(np.max(np.abs(np.cumsum(terms, axis=-1)), initial=0.0)))
    return best


@njit
def _forward_kernel_numba(rows, G, dt):
    # Phi[b, l, r] = a[l, r] + dt sum_{q<r} a[q, r] Phi[b, l, q],  a[q, r] = sum_i G[b, r, i] rows[i, q]
    B, n, k = G.shape
    phi = np.zeros((B, n, n))
    S = np.zeros((n, k))
    for b in range(B):
        S[:, :] = 0.0
        for r in range(n):
            for l in range(n):
                acc = 0.0
                for i in range(k):
                    acc += G[b, r, i] * (rows[i, l] + dt * S[l, i])
                phi[b, l, r] = acc
            for l in range(n):
                for i in range(k):
                    S[l, i] += rows[i, r] * phi[b, l, r]
    return phi


def _forward_kernel_numpy(rows, G, dt):
    B, n, k = G.shape
    phi = np.zeros((B, n, n))
    S = np.zeros((B, n, k))
    for r in range(n):
        Gr = G[:, r, :]
        col = Gr @ rows + dt * np.einsum("bli,bi->bl", S, Gr)
        phi[:, :, r] = col
        S += rows[:, r][None, None, :] * col[:, :, None]
    return phi


@njit
def _inverse_kernel_numba(rows, G, dt, m):
    # Psi[b, l, q] (1 + dt b_qq) = b[l, q] - dt sum_{q<r<m} b[r, q] Psi[b, l, r]
    B, n, k = G.shape
    psi = np.zeros((B, n, n))
    R = np.zeros((n, k))
    worst = np.inf
    for b in range(B):
        R[:, :] = 0.0
        for q in range(m - 1, -1, -1):
            bqq = 0.0
            for i in range(k):
                bqq += G[b, q, i] * rows[i, q]
            denom = 1.0 + dt * bqq
            if denom < worst:
                worst = denom
            for l in range(n):
                acc = 0.0
                for i in range(k):
                    acc += G[b, q, i] * (rows[i, l] - dt * R[l, i])
                psi[b, l, q] = acc / denom
            for l in range(n):
                for i in range(k):
                    R[l, i] += rows[i, q] * psi[b, l, q]
    return psi, worst


def _inverse_kernel_numpy(rows, G, dt, m):
    B, n, k = G.shape
    psi = np.zeros((B, n, n))
    R = np.zeros((B, n, k))
    worst = np.inf
    for q in range(m - 1, -1, -1):
        Gq = G[:, q, :]
        denom = 1.0 + dt * (Gq @ rows[:, q])
        worst = min(worst, float(np.min(denom)))
        col = (Gq @ rows - dt * np.einsum("bli,bi->bl", R, Gq)) / denom[:, None]
        psi[:, :, q] = col
        R += rows[:, q][None, None, :] * col[:, :, None]
    return psi, worst


def sup_partial_sums(W, d, reverse=False):
    d = np.ascontiguousarray(np.reshape(d, (-1, np.shape(d)[-1])), dtype=float)
    if backend() == "numba":
        return float(_sup_partial_numba(np.ascontiguousarray(W), d, reverse))
    return _sup_partial_numpy(W, d, reverse)


# ---------------------------------------------------------------------------
# families


def _flat(a, tail):
    return np.reshape(a, (-1,) + tuple(np.shape(a)[-tail:]))


@dataclass(frozen=True, eq=False)
class TransformFamily:
    """The forward family {T_t omega} for one path or a batch of paths.

    Paths are not stored explicitly: ``shifts`` (u_r = sigma_r(T_{t_r} omega))
    determines every T_{t_m} omega, and :meth:`path` / :meth:`table` rebuild
    them.  ``anchor_values[..., r, :]`` holds (T_{t_r} omega) at sigma's anchors
    and ``gradients`` the matching grad g_r.
    """

    sigma: object
    base: SamplePath
    shifts: np.ndarray
    anchor_values: np.ndarray
    gradients: np.ndarray
    iterations: int
    residual: float
    trace: np.ndarray = field(repr=False)

    @property
    def weights(self):
        return self.base.weights

    @property
    def grid(self):
        return self.base.grid

    def path(self, t):
        """T_t omega as a SamplePath carrying its shifted increments."""
        m = self.grid.index_of(t)
        W = self.weights.matrix
        u = self.shifts[..., :m]
        values = self.base.values + u @ W[:, :m].T
        dW = self.base.dW.copy()
        dW[..., :m] += self.grid.dt * u
        return SamplePath(self.grid, values, Increments(dW, self.base.increments.stream_id),
                          self.base.oracle_grade, self.weights)

    def table(self):
        """All paths (T_{t_m} omega)_{t_s}, shape batch + (n + 1, n + 1), rows indexed by m."""
        W = self.weights.matrix
        terms = self.shifts[..., None, :] * W[None, :, :]  # batch + (s, r)
        partial = np.concatenate([np.zeros(terms.shape[:-1] + (1,)), np.cumsum(terms, axis=-1)],
                                 axis=-1)  # batch + (s, m)
        return self.base.values[..., None, :] + np.swapaxes(partial, -1, -2)

    def at_anchors(self, t, anchors):
        """(T_t omega) at ``anchors`` without building whole paths."""
        m = self.grid.index_of(t)
        idx = anchor_indices(anchors, self.grid)
        return self.base.values[..., idx] + self.shifts[..., :m] @ self.weights.matrix[idx, :m].T


@dataclass(frozen=True, eq=False)
class InverseSlice:
    """The inverse family {A_{v,t} omega, v <= t} for a fixed terminal time t."""

    sigma: object
    base: SamplePath
    terminal: int
    shifts: np.ndarray
    anchor_values: np.ndarray
    gradients: np.ndarray
    iterations: int
    residual: float
    trace: np.ndarray = field(repr=False)

    @property
    def weights(self):
        return self.base.weights

    @property
    def grid(self):
        return self.base.grid

    @property
    def t(self):
        return self.terminal / self.grid.n

    def path(self, v=0.0):
        """A_{v,t} omega; v = 0 gives A_t omega."""
        j = self.grid.index_of(v)
        m = self.terminal
        if j > m:
            raise ValueError(f"v = {v} exceeds the terminal time {self.t}")
        W = self.weights.matrix
        v_ = self.shifts[..., j:m]
        values = self.base.values - v_ @ W[:, j:m].T
        dW = self.base.dW.copy()
        dW[..., j:m] -= self.grid.dt * v_
        return SamplePath(self.grid, values, Increments(dW, self.base.increments.stream_id),
                          self.base.oracle_grade, self.weights)

    def at_anchors(self, v, anchors):
        j = self.grid.index_of(v)
        idx = anchor_indices(anchors, self.grid)
        W = self.weights.matrix
        return self.base.values[..., idx] - self.shifts[..., j:self.terminal] @ W[idx, j:self.terminal].T

    def table(self):
        """All paths (A_{t_j,t} omega)_{t_s} for j <= t, shape batch + (m + 1, n + 1)."""
        m = self.terminal
        W = self.weights.matrix
        terms = self.shifts[..., None, :m] * W[None, :, :m]              # batch + (s, r)
        tail = np.cumsum(terms[..., ::-1], axis=-1)[..., ::-1]           # sum over r >= j
        tail = np.concatenate([tail, np.zeros(tail.shape[:-1] + (1,))], axis=-1)
        return self.base.values[..., None, :] - np.swapaxes(tail, -1, -2)

    def anchor_table(self, anchors):
        """(A_{t_j,t} omega) at ``anchors`` for every node j <= t, shape batch + (m + 1, k)."""
        m = self.terminal
        idx = anchor_indices(anchors, self.grid)
        terms = self.shifts[..., :m, None] * self.weights.matrix[idx, :m].T
        tail = np.cumsum(terms[..., ::-1, :], axis=-2)[..., ::-1, :]
        tail = np.concatenate([tail, np.zeros(tail.shape[:-2] + (1, len(idx)))], axis=-2)
        return self.base.values[..., None, idx] - tail


def _require_increments(omega):
    if omega.increments is None:
        raise ValueError("transformations act on increments; the path carries none")
    return omega.require_weights()


def forward_transform(sigma, omega, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, trace="exact"):
    """Picard iteration for the forward family.

    Each sweep recomputes every shift from the previous iterate.  The trace
    records the sup-norm change of the family paths per sweep ("exact") or a
    cheap upper bound of it ("bound"); iteration stops once it is <= tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    weights = _require_increments(omega)
    grid = omega.grid
    W = weights.matrix
    idx = anchor_indices(sigma.anchors, grid)
    Wa = W[idx]                      # (k, n)
    base_a = omega.values[..., idx]  # batch + (k,)
    t_mid = grid.midpoints
    batch = omega.values.shape[:-1]
    u = np.zeros(batch + (grid.n,))
    rowmax = float(np.max(np.sum(np.abs(W), axis=1)))
    history = []
    X = np.broadcast_to(base_a[..., None, :], batch + (grid.n, sigma.k))
    for _ in range(max_iter):
        # anchors of T_{t_r} omega: omega_a + sum_{q < r} W[a, q] u_q
        contrib = u[..., :, None] * Wa.T
        X = base_a[..., None, :] + np.cumsum(contrib, axis=-2) - contrib
        u_new = sigma.values(t_mid, X)
        d = u_new - u
        u = u_new
        if trace == "exact":
            inc = sup_partial_sums(W, d)
        else:
            inc = rowmax * float(np.max(np.abs(d), initial=0.0))
        history.append(inc)
        if inc <= tol:
            break
    else:
        raise PicardError(history, tol)
    contrib = u[..., :, None] * Wa.T
    X = base_a[..., None, :] + np.cumsum(contrib, axis=-2) - contrib
    grads = sigma.gradients(t_mid, X)
    return TransformFamily(sigma, omega, u, X, grads, len(history), history[-1],
                           np.array(history))


def inverse_transform(sigma, omega, t=1.0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                      trace="bound"):
    """Picard iteration for the inverse slice {A_{v,t} omega} ending at node t."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    weights = _require_increments(omega)
    grid = omega.grid
    m = grid.index_of(t)
    W = weights.matrix
    idx = anchor_indices(sigma.anchors, grid)
    Wa = W[idx]
    base_a = omega.values[..., idx]
    t_mid = grid.midpoints
    batch = omega.values.shape[:-1]
    v = np.zeros(batch + (grid.n,))
    live = np.arange(grid.n) < m
    rowmax = float(np.max(np.sum(np.abs(W), axis=1)))
    history = []

    def anchors_of(v):
        # anchors of A_{t_q,t} omega: omega_a - sum_{q <= r < m} W[a, r] v_r
        contrib = v[..., :, None] * Wa.T
        return base_a[..., None, :] - np.cumsum(contrib[..., ::-1, :], axis=-2)[..., ::-1, :]

    for _ in range(max_iter):
        Y = anchors_of(v)
        v_new = np.where(live, sigma.values(t_mid, Y), 0.0)
        d = v_new - v
        v = v_new
        if trace == "exact":
            inc = sup_partial_sums(W, d, reverse=True)
        else:
            inc = rowmax * float(np.max(np.abs(d), initial=0.0))
        history.append(inc)
        if inc <= tol:
            break
    else:
        raise PicardError(history, tol)
    Y = anchors_of(v)
    grads = np.where(live[:, None], sigma.gradients(t_mid, Y), 0.0)
    return InverseSlice(sigma, omega, m, v, Y, grads, len(history), history[-1],
                        np.array(history))


def roundtrip_error(sigma, omega, t, tol=DEFAULT_TOL):
    """sup-node |T_t(A_t omega) - omega| per path."""
    sl = inverse_transform(sigma, omega, t, tol=tol)
    back = forward_transform(sigma, sl.path(0.0), tol=tol, trace="bound").path(t)
    return np.max(np.abs(back.values - omega.values), axis=-1)


# ---------------------------------------------------------------------------
# derivative kernels and determinants


@dataclass(frozen=True, eq=False)
class DerivativeKernel:
    """Phi[s, r] = D_s[sigma_r(T_r omega)] or Psi[s, r] = D_s[sigma_r(A_{r,t} omega)].

    ``matrix`` has shape batch + (n, n) with the derivative cell s first.
    ``rows`` (k, n) are the kernel rows at sigma's anchors and ``gradients``
    the matching grad g_r along the family, so a[r, s] = (D_r sigma_s) is
    sum_i gradients[s, i] rows[i, r].
    """

    direction: str
    matrix: np.ndarray
    rows: np.ndarray
    gradients: np.ndarray
    dt: float
    terminal: int

    def sigma_derivative_diag(self):
        """(D_l sigma_l) along the family: a_ll (forward) or b_ll (inverse)."""
        return np.einsum("...li,il->...l", self.gradients, self.rows)

    def diag(self):
        return np.diagonal(self.matrix, axis1=-2, axis2=-1)

    def operator(self, v=0, t=None):
        """Discretized D[1_[v,t] u] acting on L^2 cells, M[l, m] = dt D_m u_l (sign folded in)."""
        m = self.terminal if t is None else t
        block = self.matrix[..., v:m, v:m]
        sign = 1.0 if self.direction == "forward" else -1.0
        return sign * self.dt * np.swapaxes(block, -1, -2)


def shift_derivative(sigma, family):
    """Solve the derivative Volterra system along a forward family or inverse slice."""
    grid = family.grid
    rows = kernel_rows(family.weights, sigma.anchors)
    n = grid.n
    batch = family.shifts.shape[:-1]
    if sigma.k == 0:
        terminal = getattr(family, "terminal", n)
        direction = "inverse" if isinstance(family, InverseSlice) else "forward"
        return DerivativeKernel(direction, np.zeros(batch + (n, n)), rows,
                                np.zeros(batch + (n, 0)), grid.dt, terminal)
    G = np.ascontiguousarray(_flat(family.gradients, 2))
    rows_c = np.ascontiguousarray(rows)
    fast = backend() == "numba"
    if isinstance(family, InverseSlice):
        m = family.terminal
        if fast:
            psi, worst = _inverse_kernel_numba(rows_c, G, grid.dt, m)
        else:
            psi, worst = _inverse_kernel_numpy(rows_c, G, grid.dt, m)
        if m and worst <= 0.0:
            raise SingularStepError(f"inverse derivative pivot {worst:.3e} <= 0")
        return DerivativeKernel("inverse", psi.reshape(batch + (n, n)), rows,
                                family.gradients, grid.dt, m)
    phi = _forward_kernel_numba(rows_c, G, grid.dt) if fast else \
        _forward_kernel_numpy(rows_c, G, grid.dt)
    return DerivativeKernel("forward", phi.reshape(batch + (n, n)), rows,
                            family.gradients, grid.dt, n)


def _closed_terms(kernel):
    """Per-cell terms of the double sum in the closed-form determinant."""
    n = kernel.matrix.shape[-1]
    if kernel.gradients.shape[-1] == 0:
        return np.zeros(kernel.matrix.shape[:-1])
    if kernel.direction == "forward":
        mask = np.tril(np.ones((n, n)), k=-1)             # r < s
    else:
        mask = np.triu(np.ones((n, n)), k=1)              # r > s
        mask[:, kernel.terminal:] = 0.0
    # sum_r [s, r] mask * matrix[s, r] * rows[i, r] -> (s, i), then dot with gradients[s, i]
    T = (kernel.matrix * mask) @ kernel.rows.T
    return np.sum(T * kernel.gradients, axis=-1)


def cf_determinant_closed(kernel, v=0.0, t=1.0, log=False):
    """Closed-form Carleman-Fredholm determinant as a double Riemann sum.

    forward: exp{-dt^2 sum_{s<t} sum_{r<s} (D_r sigma_s)(T_s) Phi[s, r]}
    inverse: exp{-dt^2 sum_{v<=s<t} sum_{s<r<t} (D_r sigma_s)(A_{s,t}) Psi[s, r]}
    """
    n = kernel.matrix.shape[-1]
    j, m = int(round(v * n)), int(round(t * n))
    expo = -kernel.dt * kernel.dt * np.sum(_closed_terms(kernel)[..., j:m], axis=-1)
    return expo if log else np.exp(expo)


@dataclass(frozen=True)
class SpectralDeterminant:
    value: float
    eigen_form: float
    det_form: float
    rel_gap: float


def cf_determinant_spectral(M, check=1e-10):
    """prod (1 + lam) exp(-lam) over the eigenvalues of M, and det(I + M) exp(-tr M).

    Both forms are computed; for a finite matrix they agree, and a relative
    gap above ``check`` raises ArithmeticError.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return SpectralDeterminant(1.0, 1.0, 1.0, 0.0)
    lam = np.linalg.eigvals(M)
    eig_log = np.sum(np.log(1.0 + lam.astype(complex)) - lam)
    eigen_form = float(np.real(np.exp(eig_log)))
    sign, logdet = np.linalg.slogdet(np.eye(M.shape[0]) + M)
    det_form = float(sign * math.exp(logdet - np.trace(M)))
    scale = max(abs(det_form), abs(eigen_form), 1e-300)
    gap = abs(det_form - eigen_form) / scale
    if gap > check:
        raise ArithmeticError(f"eigenvalue and determinant forms differ by {gap:.2e}")
    return SpectralDeterminant(det_form, eigen_form, det_form, gap)


def grid_log_determinant(kernel, v=0.0, t=1.0):
    """Exact log d_c of the discretized operator from its triangular factorization.

    forward: sum log(1 + dt a_ll) - dt sum Phi_ll
    inverse: -sum log(1 + dt b_ll) + dt sum Psi_ll
    """
    n = kernel.matrix.shape[-1]
    j, m = int(round(v * n)), int(round(t * n))
    dt = kernel.dt
    a = kernel.sigma_derivative_diag()[..., j:m] if kernel.gradients.shape[-1] else \
        np.zeros(kernel.matrix.shape[:-2] + (m - j,))
    tr = dt * np.sum(kernel.diag()[..., j:m], axis=-1)
    logs = np.sum(np.log1p(dt * a), axis=-1)
    return logs - tr if kernel.direction == "forward" else tr - logs


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True, eq=False)
class DensityProcess:
    """Density values with their exponent components, at node indices ``nodes``.

    forward-family density (of A_t):  log value = -divergence - quadratic + log_det
    inverse-family density (of T_t):  log value = +divergence - quadratic + log_det
    ``log_det`` is the exact grid log Carleman-Fredholm determinant; ``closed``
    is the log of the double-integral closed form, which differs by O(dt).
    """

    kind: str
    nodes: np.ndarray
    value: np.ndarray
    divergence: np.ndarray
    quadratic: np.ndarray
    log_det: np.ndarray
    closed: np.ndarray
    start: int = 0

    def rows(self, path_ids=None, n=None):
        """JSON-ready records: one per (path, node)."""
        vals = np.reshape(self.value, (-1, len(self.nodes)))
        comps = [np.reshape(c, vals.shape) for c in
                 (self.divergence, self.quadratic, self.log_det, self.closed)]
        ids = np.arange(vals.shape[0]) if path_ids is None else np.asarray(path_ids)
        n = n or max(int(np.max(self.nodes)), 1)
        out = []
        for p in range(vals.shape[0]):
            for j, node in enumerate(self.nodes):
                out.append({"path_id": int(ids[p]), "t": float(node) / n, "kind": self.kind,
                            "divergence": float(comps[0][p, j]), "quadratic": float(comps[1][p, j]),
                            "log_det": float(comps[2][p, j]), "closed": float(comps[3][p, j]),
                            "value": float(vals[p, j])})
        return out


def _cumulative(x):
    return np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)


def inverse_density(sigma, omega, family=None, kernel=None, t=None):
    """Density of A_t (the inverse of T_t), at node t or at every node when t is None."""
    family = family or forward_transform(sigma, omega)
    kernel = kernel or shift_derivative(sigma, family)
    grid = omega.grid
    dt = grid.dt
    u = family.shifts
    phi_diag = kernel.diag()
    a = kernel.sigma_derivative_diag() if sigma.k else np.zeros_like(u)
    div = _cumulative(u * omega.dW - dt * phi_diag)
    quad = 0.5 * dt * _cumulative(u * u)
    with np.errstate(invalid="ignore", divide="ignore"):
        logdet = _cumulative(np.log1p(dt * a) - dt * phi_diag)
    closed = -dt * dt * _cumulative(_closed_terms(kernel))
    nodes = np.arange(grid.n + 1) if t is None else np.array([grid.index_of(t)])
    pick = (Ellipsis, nodes)
    value = np.exp(-div[pick] - quad[pick] + logdet[pick])
    return DensityProcess("inverse-of-forward", nodes, value, div[pick], quad[pick],
                          logdet[pick], closed[pick])


def forward_density(sigma, omega, slice_=None, kernel=None, t=1.0, v=0.0):
    """Density L_{v,t} of T (the inverse of A_{v,t}); v = 0 gives L_t."""
    slice_ = slice_ or inverse_transform(sigma, omega, t)
    kernel = kernel or shift_derivative(sigma, slice_)
    grid = omega.grid
    dt = grid.dt
    j, m = grid.index_of(v), slice_.terminal
    vv = slice_.shifts[..., j:m]
    psi_diag = kernel.diag()[..., j:m]
    b = kernel.sigma_derivative_diag()[..., j:m] if sigma.k else np.zeros_like(vv)
    div = skorokhod_sum(vv, psi_diag, omega.dW[..., j:m], dt, m - j)
    quad = 0.5 * dt * np.sum(vv * vv, axis=-1)
    logdet = dt * np.sum(psi_diag, axis=-1) - np.sum(np.log1p(dt * b), axis=-1)
    closed = cf_determinant_closed(kernel, v, slice_.t, log=True)
    value = np.exp(div - quad + logdet)
    ex = (Ellipsis, None)
    return DensityProcess("forward", np.array([m]), value[ex], div[ex], quad[ex],
                          logdet[ex], np.asarray(closed)[ex], start=j)


def derivative_norm_bound(kernel):
    """Empirical int sup_omega |D[sigma_t(T_t)]|_2^2 dt against 2 C^2 exp(2 C^2) is checked by callers."""
    mat = np.reshape(kernel.matrix, (-1,) + kernel.matrix.shape[-2:])
    per_t = np.sum(mat ** 2, axis=-2) * kernel.dt      # (paths, t)
    return float(np.sum(np.max(per_t, axis=0)) * kernel.dt)


def transformed_functional(G, family, t):
    """G(T_t omega) for a forward family, or G(A_{v,t} omega) (v = t argument) for a slice."""
    return G.value(family.at_anchors(t, G.anchors))


def chain_rule_derivative(G, family, kernel, t):
    """Malliavin derivative of omega -> G(T_t omega) (forward) or G(A_{v,T} omega) (inverse, v = t)."""
    grid = family.grid
    rows = kernel_rows(family.weights, G.anchors)         # (kG, n)
    x = family.at_anchors(t, G.anchors)
    dG = G.gradient(x)                                     # batch + (kG,)
    j = grid.index_of(t)
    if kernel.direction == "forward":
        cells = slice(0, j)
        sign = 1.0
    else:
        cells = slice(j, kernel.terminal)
        sign = -1.0
    # D_s (X_t)_a = K(a, s) +- dt sum_{q in cells} K(a, q) D_s u_q
    corr = sign * kernel.dt * np.einsum("...sq,iq->...is", kernel.matrix[..., :, cells],
                                        rows[:, cells])
    return np.einsum("...i,...is->...s", dG, rows + corr)
