"""Gauss hypergeometric function 2F1 for real arguments with z <= 1.

The power series is summed directly for |z| <= 1/2.  Negative z is mapped
into [0, 1) with the Pfaff transformation, and arguments in (1/2, 1) use the
z -> 1 - z connection formula.  Two implementations are kept in step: a
scalar one (compiled by numba when available) and an array one in numpy.
"""

import math

import numpy as np

from ._accel import backend, njit

MAXITER = 20000
_RTOL = 1e-17
# Within this distance of an integer c - a - b the connection formula cancels
# badly (relative error ~ eps / distance), so the direct series is preferred.
NEAR_INT = 1e-3


class HypergeometricError(ArithmeticError):
    """Series evaluation did not converge or z is outside the domain."""

    def __init__(self, a, b, c, z, reason="series did not converge"):
        self.params = (a, b, c, z)
        super().__init__(f"2F1({a!r}, {b!r}; {c!r}; {z!r}): {reason}")


def _is_nonpos_int(x):
    return x <= 0.0 and x == math.floor(x)


@njit
def _rgamma(x):
    if x <= 0.0 and x == math.floor(x):
        return 0.0
    return 1.0 / math.gamma(x)


@njit
def _series(a, b, c, z):
    term = 1.0
    total = 1.0
    for k in range(MAXITER):
        term *= (a + k) * (b + k) / ((c + k) * (k + 1.0)) * z
        total += term
        if abs(term) <= _RTOL * abs(total):
            return total
    return np.nan


@njit
def _near_integer(x):
    return abs(x - round(x)) < NEAR_INT


@njit
def _unit_interval(a, b, c, w, one_minus_w):
    # 2F1(a, b; c; w) for 0 <= w < 1, given 1 - w separately to keep precision
    if w <= 0.5:
        return _series(a, b, c, w)
    s = c - a - b
    if _near_integer(s):
        val = _series(a, b, c, w)
        if not np.isnan(val) or s == round(s):
            return val
    g1 = math.gamma(c) * math.gamma(s) * _rgamma(c - a) * _rgamma(c - b)
    g2 = math.gamma(c) * math.gamma(-s) * _rgamma(a) * _rgamma(b)
    f1 = 0.0 if g1 == 0.0 else _series(a, b, 1.0 - s, one_minus_w)
    f2 = 0.0 if g2 == 0.0 else _series(c - a, c - b, 1.0 + s, one_minus_w)
    return g1 * f1 + g2 * (one_minus_w ** s) * f2


@njit
def hyp2f1_scalar(a, b, c, z):
    """2F1(a, b; c; z) for z <= 1; NaN signals non-convergence or bad domain."""
    if z > 1.0 or (c <= 0.0 and c == math.floor(c)):
        return np.nan
    if z == 0.0 or a == 0.0 or b == 0.0:
        return 1.0
    if z == 1.0:
        s = c - a - b
        if s <= 0.0:
            return np.nan
        return math.gamma(c) * math.gamma(s) * _rgamma(c - a) * _rgamma(c - b)
    if abs(z) <= 0.5:
        return _series(a, b, c, z)
    if z < 0.0:
        # Pfaff: (1 - z)^(-a) 2F1(a, c - b; c; z / (z - 1))
        one_minus_z = 1.0 - z
        w = -z / one_minus_z
        return one_minus_z ** (-a) * _unit_interval(a, c - b, c, w, 1.0 / one_minus_z)
    return _unit_interval(a, b, c, z, 1.0 - z)


@njit
def kernel_hyp_factor(hurst, t, s):
    """2F1(H - 1/2, 1/2 - H; H + 1/2; 1 - t/s) for 0 < s < t, without cancellation.

    Uses the Pfaff form (t/s)^(1/2 - H) 2F1(H - 1/2, 2H; H + 1/2; 1 - s/t).
    """
    a = hurst - 0.5
    if a == 0.0:
        return 1.0
    ratio = s / t
    return ratio ** a * _unit_interval(a, 2.0 * hurst, hurst + 0.5, 1.0 - ratio, ratio)


# ---------------------------------------------------------------------------
# numpy implementation (array in, array out)


def _series_np(a, b, c, z):
    a, b, c, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c, z)))
    term = np.ones(z.shape)
    total = np.ones(z.shape)
    active = np.ones(z.shape, dtype=bool)
    for k in range(MAXITER):
        if not active.any():
            break
        idx = np.nonzero(active)
        t = term[idx] * (a[idx] + k) * (b[idx] + k) / ((c[idx] + k) * (k + 1.0)) * z[idx]
        term[idx] = t
        total[idx] += t
        done = np.abs(t) <= _RTOL * np.abs(total[idx])
        active[tuple(i[done] for i in idx)] = False
    total[active] = np.nan
    return total


def _rgamma_np(x):
    x = np.asarray(x, dtype=float)
    pole = (x <= 0) & (x == np.floor(x))
    with np.errstate(all="ignore"):
        out = 1.0 / np.vectorize(math.gamma, otypes=[float])(np.where(pole, 0.5, x))
    return np.where(pole, 0.0, out)


def _gamma_np(x):
    return np.vectorize(math.gamma, otypes=[float])(np.asarray(x, dtype=float))


def _unit_interval_np(a, b, c, w, one_minus_w):
    a, b, c, w, omw = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (a, b, c, w, one_minus_w)))
    out = np.empty(w.shape)
    s = c - a - b
    direct = (w <= 0.5) | (np.abs(s - np.round(s)) < NEAR_INT)
    if direct.any():
        out[direct] = _series_np(a[direct], b[direct], c[direct], w[direct])
    # the connection formula takes over where the series did not converge
    conn = ~direct | (np.isnan(out) & (w > 0.5) & (s != np.round(s)))
    if conn.any():
        a_, b_, c_, s_, omw_ = a[conn], b[conn], c[conn], s[conn], omw[conn]
        g1 = _gamma_np(c_) * _gamma_np(s_) * _rgamma_np(c_ - a_) * _rgamma_np(c_ - b_)
        g2 = _gamma_np(c_) * _gamma_np(-s_) * _rgamma_np(a_) * _rgamma_np(b_)
        f1 = np.where(g1 == 0.0, 0.0, _series_np(a_, b_, 1.0 - s_, omw_))
        f2 = np.where(g2 == 0.0, 0.0, _series_np(c_ - a_, c_ - b_, 1.0 + s_, omw_))
        out[conn] = g1 * f1 + g2 * omw_ ** s_ * f2
    return out


def hyp2f1_numpy(a, b, c, z):
    """Vectorized 2F1 over broadcast arrays; NaN where evaluation fails."""
    a, b, c, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c, z)))
    out = np.full(z.shape, np.nan)
    bad_c = (c <= 0) & (c == np.floor(c))
    trivial = ~bad_c & ((z == 0) | (a == 0) | (b == 0))
    out[trivial] = 1.0
    rest = ~bad_c & ~trivial & (z <= 1.0)

    at_one = rest & (z == 1.0)
    if at_one.any():
        a_, b_, c_ = a[at_one], b[at_one], c[at_one]
        s = c_ - a_ - b_
        with np.errstate(all="ignore"):
            val = _gamma_np(c_) * _gamma_np(np.where(s > 0, s, 0.5)) \
                * _rgamma_np(c_ - a_) * _rgamma_np(c_ - b_)
        out[at_one] = np.where(s > 0, val, np.nan)

    small = rest & (np.abs(z) <= 0.5)
    if small.any():
        out[small] = _series_np(a[small], b[small], c[small], z[small])

    neg = rest & (z < -0.5)
    if neg.any():
        omz = 1.0 - z[neg]
        out[neg] = omz ** (-a[neg]) * _unit_interval_np(
            a[neg], c[neg] - b[neg], c[neg], -z[neg] / omz, 1.0 / omz)

    pos = rest & (z > 0.5) & (z < 1.0)
    if pos.any():
        out[pos] = _unit_interval_np(a[pos], b[pos], c[pos], z[pos], 1.0 - z[pos])
    return out


def kernel_hyp_factor_numpy(hurst, t, s):
    """Array form of :func:`kernel_hyp_factor`."""
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    a = hurst - 0.5
    if a == 0.0:
        return np.ones(t.shape)
    ratio = s / t
    return ratio ** a * _unit_interval_np(a, 2.0 * hurst, hurst + 0.5, 1.0 - ratio, ratio)


def hyp2f1(a, b, c, z):
    """Gauss hypergeometric function 2F1(a, b; c; z) for real z <= 1.

    Scalars return a float, arrays an ndarray.  Raises HypergeometricError when
    the series fails to converge within the iteration cap, when z > 1, or when
    c is a non-positive integer.
    """
    if all(np.ndim(v) == 0 for v in (a, b, c, z)):
        a, b, c, z = float(a), float(b), float(c), float(z)
        if z > 1.0:
            raise HypergeometricError(a, b, c, z, "z > 1 is outside the supported domain")
        if _is_nonpos_int(c):
            raise HypergeometricError(a, b, c, z, "c is a non-positive integer")
        if backend() == "numba":
            val = hyp2f1_scalar(a, b, c, z)
        else:
            val = float(hyp2f1_numpy(a, b, c, z))
        if not math.isfinite(val):
            raise HypergeometricError(a, b, c, z)
        return val
    out = hyp2f1_numpy(a, b, c, z) if backend() == "numpy" else \
        np.vectorize(hyp2f1_scalar, otypes=[float])(a, b, c, z)
    bad = ~np.isfinite(out)
    if bad.any():
        idx = np.argwhere(bad)[0]
        args = [float(np.broadcast_to(v, out.shape)[tuple(idx)]) for v in (a, b, c, z)]
        raise HypergeometricError(*args)
    return out
