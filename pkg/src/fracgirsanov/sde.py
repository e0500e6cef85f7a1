"""Linear Skorokhod SDEs  dX_t = b(t, X_t) dt + sigma_t X_t dB^H_t  on the grid.

The solution is assembled as X_t = L_t(omega) Z_t(A_t omega, X_0(A_t omega)),
where Z solves the pathwise anchor ODE

    Z_t = x + int_0^t Lc_s b(s, Z_s / Lc_s, T_s) ds,

Lc_s being the density of A_s.  Evaluated along A_t omega, the forward data
needed for Lc_s(A_t omega) are exactly the inverse-slice shifts: the shift on
cell l is v_l, the increment is dW_l - dt v_l and the derivative diagonal is
b_ll.  One inverse slice per output node therefore gives both L_t(omega) and
the ODE coefficients.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.integrate import simpson

from .girsanov import (DEFAULT_TOL, chain_rule_derivative, forward_transform, inverse_transform,
                       shift_derivative)
from .malliavin import CylindricalFunctional, anchor_indices, derivative_field, kernel_rows
from .registry import Drift, drift_spec, functional as registry_functional

PROBES = 1000


class DriftRejected(ValueError):
    """A declared Lipschitz profile or bound failed on a probe."""

    def __init__(self, reason, probe):
        self.probe = probe
        super().__init__(f"{reason}; probe {probe}")


class AnchorODEError(ArithmeticError):
    def __init__(self, node):
        self.node = node
        super().__init__(f"non-finite density coefficient at node {node}")


def validate_drift(spec, probes=PROBES, seed=0):
    """Check a drift against its declared (gamma, M) on randomized probes.

    ``spec`` is a registry key, a (b, gamma, M, anchors, name) tuple, or a
    Drift.  Probes draw t uniformly, x and y from a wide normal mixture and
    path coordinates from N(0, 1).
    """
    if isinstance(spec, str):
        spec = drift_spec(spec)
    if isinstance(spec, Drift):
        spec = (spec.b, spec.gamma, spec.M, spec.anchors, spec.name)
    b, gamma, M, anchors, name = spec
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, probes)
    scale = rng.choice([0.1, 1.0, 10.0], probes)
    x = rng.normal(0.0, 1.0, probes) * scale
    y = x + rng.normal(0.0, 1.0, probes) * scale
    w = rng.normal(0.0, 1.0, (probes, len(anchors)))
    g = np.asarray(gamma(t), dtype=float)
    lhs = np.abs(np.asarray(b(t, x, w)) - np.asarray(b(t, y, w)))
    bad = np.nonzero(lhs > g * np.abs(x - y) * (1 + 1e-12) + 1e-15)[0]
    if bad.size:
        i = int(bad[0])
        raise DriftRejected(f"drift {name!r} is not gamma-Lipschitz",
                            {"t": float(t[i]), "x": float(x[i]), "y": float(y[i])})
    at_zero = np.abs(np.asarray(b(t, np.zeros(probes), w)))
    bad = np.nonzero(at_zero > M * (1 + 1e-12))[0]
    if bad.size:
        raise DriftRejected(f"|b(t, 0)| exceeds M = {M}", {"t": float(t[bad[0]])})
    ts = np.linspace(0.0, 1.0, 2049)
    integral = float(simpson(np.asarray(gamma(ts), dtype=float), x=ts))
    if integral > M * (1 + 1e-9):
        raise DriftRejected(f"int gamma = {integral:.4g} exceeds M = {M}", {})
    return Drift(b, gamma, M, anchors, name)


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """X_0: a constant or a cylindrical functional, with an integrability tag p >= 2."""

    value: object
    p: float = 2.0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("initial condition needs p >= 2")

    @classmethod
    def parse(cls, text):
        try:
            return cls(float(text))
        except (TypeError, ValueError):
            return cls(registry_functional(text))

    @property
    def anchors(self):
        return self.value.anchors if isinstance(self.value, CylindricalFunctional) else ()

    def at(self, coords, batch):
        """X_0 from its anchor coordinates (batch + (k,)); constants broadcast."""
        if isinstance(self.value, CylindricalFunctional):
            return self.value.value(coords)
        return np.full(batch, float(self.value))

    def on_path(self, path):
        if isinstance(self.value, CylindricalFunctional):
            return self.value(path)
        return np.full(path.values.shape[:-1], float(self.value))


@dataclass(frozen=True, eq=False)
class SolutionPath:
    """X at the output nodes with the factors L_t and Z_t(A_t, X_0(A_t))."""

    nodes: np.ndarray
    X: np.ndarray
    L: np.ndarray
    Z: np.ndarray
    n: int
    iterations: np.ndarray = field(default=None, repr=False)

    @property
    def times(self):
        return self.nodes / self.n

    def rows(self, path_ids=None):
        X = np.reshape(self.X, (-1, len(self.nodes)))
        L = np.reshape(self.L, X.shape)
        Z = np.reshape(self.Z, X.shape)
        ids = np.arange(X.shape[0]) if path_ids is None else np.asarray(path_ids)
        return [{"path_id": int(ids[p]), "t": float(self.times[j]), "X": float(X[p, j]),
                 "L": float(L[p, j]), "Z": float(Z[p, j])}
                for p in range(X.shape[0]) for j in range(len(self.nodes))]


def solve_anchor_ode(coef, drift, x0, dt, drift_coords=None, substeps=1):
    """RK4 for Z' = c_s b(s, Z / c_s, y_s) on nodes 0..m with node spacing dt.

    ``coef`` holds the density Lc at the nodes (batch + (m + 1,)), either as an
    array or as a DensityProcess over all nodes 0..m; between nodes it and the
    drift's path coordinates ``drift_coords`` (batch + (m + 1, k)) are
    interpolated linearly.  ``substeps`` RK4 steps are taken per cell, which
    refines the integrator without pretending to refine the coefficient data.
    Returns Z at every node.
    """
    coef = np.asarray(getattr(coef, "value", coef), dtype=float)
    bad = np.nonzero(~np.all(np.isfinite(coef) & (coef > 0), axis=tuple(range(coef.ndim - 1))))[0]
    if bad.size:
        raise AnchorODEError(int(bad[0]))
    m = coef.shape[-1] - 1
    Z = np.empty(coef.shape)
    Z[..., 0] = x0
    if drift_coords is None:
        drift_coords = np.zeros(coef.shape + (0,))
    h = dt / substeps

    def f(j, theta, z):
        c = (1 - theta) * coef[..., j] + theta * coef[..., j + 1]
        y = (1 - theta) * drift_coords[..., j, :] + theta * drift_coords[..., j + 1, :]
        return c * drift((j + theta) * dt, z / c, y)

    for j in range(m):
        z = Z[..., j]
        for q in range(substeps):
            a, mid, b = q / substeps, (q + 0.5) / substeps, (q + 1) / substeps
            k1 = f(j, a, z)
            k2 = f(j, mid, z + 0.5 * h * k1)
            k3 = f(j, mid, z + 0.5 * h * k2)
            k4 = f(j, b, z + h * k3)
            z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Z[..., j + 1] = z
    return Z


def slice_densities(slice_):
    """log L_t(omega) and log Lc_s(A_t omega) for s = 0..t from one inverse slice."""
    grid = slice_.grid
    dt = grid.dt
    m = slice_.terminal
    v = slice_.shifts[..., :m]
    dW = slice_.base.dW[..., :m]
    if slice_.sigma.k:
        rows = kernel_rows(slice_.weights, slice_.sigma.anchors)
        bdiag = np.einsum("...li,il->...l", slice_.gradients[..., :m, :], rows[:, :m])
    else:
        bdiag = np.zeros(v.shape)
    log1p = np.log1p(dt * bdiag)
    log_L = np.sum(v * dW, axis=-1) - 0.5 * dt * np.sum(v * v, axis=-1) - np.sum(log1p, axis=-1)
    cell = -v * (dW - dt * v) - 0.5 * dt * v * v + log1p
    log_Lc = np.concatenate([np.zeros(cell.shape[:-1] + (1,)), np.cumsum(cell, axis=-1)], axis=-1)
    return log_L, log_Lc


def solve_skorokhod_sde(sigma, drift, X0, omega, nodes=None, tol=DEFAULT_TOL):
    """X_t = L_t(omega) Z_t(A_t omega, X_0(A_t omega)) at the requested node indices."""
    if not isinstance(X0, InitialCondition):
        X0 = InitialCondition(X0)
    if not isinstance(drift, Drift):
        drift = validate_drift(drift)
    grid = omega.grid
    nodes = np.arange(grid.n + 1) if nodes is None else np.asarray(nodes, dtype=np.int64)
    X = np.empty(omega.values.shape[:-1] + (nodes.size,))
    L = np.empty_like(X)
    Z = np.empty_like(X)
    iters = np.zeros(nodes.size, dtype=np.int64)
    for j, m in enumerate(nodes):
        if m == 0:
            x0 = X0.on_path(omega)
            X[..., j], L[..., j], Z[..., j] = x0, 1.0, x0
            continue
        sl = inverse_transform(sigma, omega, m / grid.n, tol=tol)
        iters[j] = sl.iterations
        L[..., j], Z[..., j] = assemble_from_slice(sl, drift, X0)
        X[..., j] = L[..., j] * Z[..., j]
    return SolutionPath(nodes, X, L, Z, grid.n, iters)


def assemble_from_slice(slice_, drift, X0, x0_shift=0.0):
    """(L_t(omega), Z_t(A_t omega, X_0(A_t omega) + x0_shift)) from one inverse slice."""
    batch = slice_.base.values.shape[:-1]
    log_L, log_Lc = slice_densities(slice_)
    x0 = X0.at(slice_.at_anchors(0.0, X0.anchors) if X0.anchors else None, batch)
    coords = slice_.anchor_table(drift.anchors) if drift.anchors else None
    z = solve_anchor_ode(np.exp(log_Lc), drift, x0 + x0_shift, slice_.grid.dt, coords)[..., -1]
    return np.exp(log_L), z


def perturbation_probe(sigma, drift, X0, omega, eps=1e-6, t=1.0, tol=DEFAULT_TOL):
    """Change in X_t when the anchor ODE starts from x0 + eps, against exp(int gamma) eps max L_t.

    Returns (observed sup |dX_t|, bound).  A continuity echo of uniqueness, not a proof.
    """
    if not isinstance(X0, InitialCondition):
        X0 = InitialCondition(X0)
    sl = inverse_transform(sigma, omega, t, tol=tol)
    L, z = assemble_from_slice(sl, drift, X0)
    _, z_eps = assemble_from_slice(sl, drift, X0, eps)
    observed = float(np.max(np.abs(L * (z_eps - z))))
    ts = np.linspace(0.0, t, 2049)
    growth = math.exp(float(simpson(np.asarray(drift.gamma(ts), dtype=float), x=ts)))
    return observed, growth * eps * float(np.max(L))


@dataclass(frozen=True)
class ResidualRecord:
    value: float
    se: float
    z: float
    samples: int
    terms: dict


def duality_terms(sigma, drift, X0, G, omega, tau=1.0, solution=None):
    """Per-path integrand of the duality residual at time tau.

    G X_tau - G X_0 - G int_0^tau b(t, X_t) dt - int_0^tau D_t G sigma_t X_t dt,
    with Simpson's rule for the drift integral and cell-averaged X in the
    correction term (sigma and D G are cell-constant).  Returns the
    per-path residual and the four terms separately.
    """
    grid = omega.grid
    m = grid.index_of(tau)
    dt = grid.dt
    sol = solution or solve_skorokhod_sde(sigma, drift, X0, omega, nodes=np.arange(m + 1))
    Xn = sol.X[..., :m + 1]
    Gv = G(omega)
    t = np.arange(m + 1) * dt
    coords = omega.values[..., [grid.index_of(a) for a in drift.anchors]] if drift.anchors else None
    y = np.zeros(Xn.shape + (0,)) if coords is None else \
        np.broadcast_to(coords[..., None, :], Xn.shape + (coords.shape[-1],))
    bvals = drift(t, Xn, y)
    b_int = simpson(bvals, dx=dt, axis=-1) if m > 1 else 0.5 * dt * np.sum(bvals, axis=-1)
    DG = derivative_field(G, omega).values[..., :m]
    sig = sigma.on_path(omega)[..., :m]
    Xbar = 0.5 * (Xn[..., :-1] + Xn[..., 1:])
    corr = dt * np.sum(DG * sig * Xbar, axis=-1)
    terms = {"G_X_tau": Gv * Xn[..., -1], "G_X_0": Gv * Xn[..., 0], "G_int_b": Gv * b_int,
             "int_DG_sigma_X": corr}
    resid = terms["G_X_tau"] - terms["G_X_0"] - terms["G_int_b"] - terms["int_DG_sigma_X"]
    return resid, terms


def duality_residual(sigma, drift, X0, G, tau, N, stream, weights, chunk=2000):
    """Monte Carlo estimate of the duality residual with its standard error and z-score.

    ``stream`` is a (seed, tag) pair; path p uses the substream (seed, tag, p).
    """
    from .fractional import fbm_from_increments, sample_increment_batch
    seed, tag = stream
    parts = []
    for lo in range(0, N, chunk):
        ids = np.arange(lo, min(N, lo + chunk))
        omega = fbm_from_increments(weights, sample_increment_batch(seed, tag, ids, weights.grid))
        parts.append(duality_terms(sigma, drift, X0, G, omega, tau)[0])
    r = np.concatenate(parts)
    mean = float(np.mean(r))
    se = float(np.std(r, ddof=1) / math.sqrt(r.size))
    z = 0.0 if se == 0.0 else mean / se
    return ResidualRecord(mean, se, z, int(r.size), {})


def temporal_forward_check(F, sigma, omega, family=None):
    """Finite differences of t -> F_t(T_t omega) against the analytic rate.

    Returns (fd, analytic), each batch + (n,).  On cell l the analytic rate
    d/dt F_t + sigma_t D_t F_t is evaluated at the cell midpoint in time and at
    the average of T_{t_l} omega and T_{t_l+1} omega, with sigma_t(T_t omega)
    the family shift on that cell.
    """
    family = family or forward_transform(sigma, omega)
    grid = omega.grid
    n, dt = grid.n, grid.dt
    idx = anchor_indices(F.anchors, grid)
    W = family.weights.matrix
    contrib = family.shifts[..., :, None] * W[idx].T                 # batch + (n, k)
    X = omega.values[..., None, idx] + np.concatenate(
        [np.zeros(contrib.shape[:-2] + (1, len(idx))), np.cumsum(contrib, axis=-2)], axis=-2)
    vals = F.values(grid.nodes, X)
    fd = np.diff(vals, axis=-1) / dt
    Xm = 0.5 * (X[..., :-1, :] + X[..., 1:, :])
    tm = grid.midpoints
    rows = kernel_rows(family.weights, F.anchors)                      # (k, n)
    space = np.sum(F.gradients(tm, Xm) * rows.T, axis=-1) * family.shifts
    return fd, F.time_derivative(tm, Xm) + space


def temporal_inverse_check(G, sigma, omega, tol=DEFAULT_TOL):
    """Finite differences of t -> G(A_t omega) against -sigma_t(omega) D_t[G(A_t)].

    Returns (fd, analytic), each batch + (n,).  The derivative on cell l is the
    average of D_l[G(A_{t_l})] and D_l[G(A_{t_l+1})].
    """
    grid = omega.grid
    n, dt = grid.n, grid.dt
    batch = omega.values.shape[:-1]
    vals = np.empty(batch + (n + 1,))
    left = np.empty(batch + (n,))
    right = np.empty(batch + (n,))
    for m in range(n + 1):
        sl = inverse_transform(sigma, omega, m / n, tol=tol)
        vals[..., m] = G.value(sl.at_anchors(0.0, G.anchors))
        D = chain_rule_derivative(G, sl, shift_derivative(sigma, sl), 0.0)
        if m < n:
            left[..., m] = D[..., m]
        if m > 0:
            right[..., m - 1] = D[..., m - 1]
    fd = np.diff(vals, axis=-1) / dt
    return fd, -sigma.on_path(omega) * 0.5 * (left + right)
