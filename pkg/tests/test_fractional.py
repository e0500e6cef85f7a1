import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import beta

from fracgirsanov import fractional as fr
from fracgirsanov.fractional import (GridError, Hurst, Increments, KernelWeights, TimeGrid,
                                     apply_fractional_operator, cameron_martin_norm,
                                     cholesky_factor, covariance, fbm_cholesky_oracle,
                                     fbm_from_increments, kernel_cell_weights, kernel_value,
                                     sample_increment_batch, sample_increments)
from fracgirsanov.rng import Stream


def mp_kernel(H, t, s):
    c = mpmath.sqrt(2 * H * mpmath.gamma(1.5 - H) / (mpmath.gamma(H + 0.5) * mpmath.gamma(2 - 2 * H)))
    return c * (t - s) ** (H - 0.5) * mpmath.hyp2f1(H - 0.5, 0.5 - H, H + 0.5, 1 - t / s)


# -- types ------------------------------------------------------------------

@pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5])
def test_hurst_rejects_outside_unit_interval(bad):
    with pytest.raises(ValueError):
        Hurst(bad)


def test_hurst_guaranteed_range():
    assert Hurst(0.3).guaranteed and not Hurst(0.05).guaranteed


@pytest.mark.parametrize("n", [1, 7, 64])
def test_grid_nodes(n):
    g = TimeGrid(n)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert np.all(np.diff(g.nodes) > 0)
    assert g.dt == 1.0 / n


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_grid_rejects_bad_counts(bad):
    with pytest.raises(ValueError):
        TimeGrid(bad)


def test_index_of_off_grid():
    with pytest.raises(GridError):
        TimeGrid(8).index_of(0.3)
    assert TimeGrid(8).index_of(0.375) == 3


# -- kernel and covariance --------------------------------------------------

def test_kernel_half_is_indicator():
    assert kernel_value(0.5, 0.7, 0.2) == pytest.approx(1.0, abs=1e-15)
    assert kernel_value(0.5, 0.7, 0.7) == 0.0
    assert kernel_value(0.5, 0.7, 0.9) == 0.0


@pytest.mark.parametrize("H", [0.1, 0.3, 0.75, 0.9])
def test_kernel_vanishes_above_diagonal(H):
    assert kernel_value(H, 0.4, 0.4) == 0.0
    assert kernel_value(H, 0.4, 0.8) == 0.0


def test_kernel_singular_origin():
    with pytest.raises(ValueError):
        kernel_value(0.3, 1.0, 0.0)


def test_kernel_against_integral_representation():
    # H > 1/2: K(t, s) = c s^(1/2-H) int_s^t (u - s)^(H-3/2) u^(H-1/2) du
    H, t, s = 0.75, 1.0, 0.5
    c = math.sqrt(H * (2 * H - 1) / beta(2 - 2 * H, H - 0.5))
    val, _ = integrate.quad(lambda u: u ** (H - 0.5), s, t, weight="alg", wvar=(H - 1.5, 0.0),
                            epsabs=0, epsrel=1e-13)
    assert kernel_value(H, t, s) == pytest.approx(c * s ** (0.5 - H) * val, rel=1e-8)


@settings(max_examples=60, deadline=None)
@given(H=st.floats(0.05, 0.95), t=st.floats(0.01, 1.0), frac=st.floats(0.001, 0.999))
def test_kernel_against_mpmath(H, t, frac):
    s = t * frac
    assert kernel_value(H, t, s) == pytest.approx(float(mp_kernel(H, t, s)), rel=1e-10)


def test_covariance_examples():
    assert covariance(0.3, 0.6, 0.6) == pytest.approx(0.6 ** 0.6)
    assert covariance(0.5, 0.2, 0.7) == pytest.approx(0.2)
    assert covariance(0.75, 0.5, 1.0) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(H=st.floats(0.05, 0.95), s=st.floats(0, 1), t=st.floats(0, 1))
def test_covariance_symmetric_and_bounded(H, s, t):
    c = covariance(H, s, t)
    assert c == pytest.approx(covariance(H, t, s))
    assert abs(c) <= math.sqrt(covariance(H, s, s) * covariance(H, t, t)) + 1e-12


# -- kernel weights ---------------------------------------------------------

@pytest.mark.parametrize("n", [1, 5, 32])
def test_weights_half_exact(n):
    w = kernel_cell_weights(0.5, TimeGrid(n)).matrix
    np.testing.assert_array_equal(w, np.tril(np.full((n + 1, n), 1.0 / n), k=-1))


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_single_cell_integral_against_mpmath(H):
    mpmath.mp.dps = 40
    ref = mpmath.quad(lambda s: mp_kernel(H, 1, s), [0, mpmath.mpf(1) / 2 ** 20, mpmath.mpf(1) / 1024,
                                                     0.5, 1])
    mpmath.mp.dps = 15
    w = kernel_cell_weights(H, TimeGrid(1), scheme="cell").matrix
    assert w[1, 0] == pytest.approx(float(ref), rel=1e-12)


@pytest.mark.parametrize("H", [0.1, 0.25, 0.75, 0.9])
@pytest.mark.parametrize("scheme", ["moment", "cell"])
def test_weights_triangular_and_finite(H, scheme):
    w = kernel_cell_weights(H, TimeGrid(40), scheme=scheme).matrix
    assert np.all(np.isfinite(w))
    assert np.all(np.triu(w) == 0.0)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_interior_cells_against_quad(H):
    n = 16
    w = kernel_cell_weights(H, TimeGrid(n), scheme="cell").matrix
    for i, j in [(5, 2), (16, 9), (16, 15), (3, 2)]:
        ref, _ = integrate.quad(lambda s: kernel_value(H, i / n, s), j / n, (j + 1) / n,
                                epsabs=0, epsrel=1e-12, limit=200)
        assert w[i, j] == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("H", [0.25, 0.5, 0.75])
def test_gram_identity(H):
    g = TimeGrid(256)
    G = kernel_cell_weights(H, g).gram()
    t = g.nodes
    keep = t >= 0.1
    C = covariance(H, t[:, None], t[None, :])
    rel = np.abs(G - C)[np.ix_(keep, keep)] / C[np.ix_(keep, keep)]
    assert rel.max() <= 0.02


@pytest.mark.parametrize("H", [0.1, 0.3, 0.9])
def test_moment_scheme_node_variances_exact(H):
    g = TimeGrid(64)
    G = kernel_cell_weights(H, g).gram()
    np.testing.assert_allclose(np.diag(G), g.nodes ** (2 * H), rtol=1e-13, atol=1e-15)


def test_gram_error_shrinks_with_n():
    errs = []
    for n in (32, 128):
        g = TimeGrid(n)
        G = kernel_cell_weights(0.25, g).gram()
        t = g.nodes
        keep = t >= 0.1
        C = covariance(0.25, t[:, None], t[None, :])
        errs.append((np.abs(G - C)[np.ix_(keep, keep)] / C[np.ix_(keep, keep)]).max())
    assert errs[1] < errs[0]


@pytest.mark.parametrize("H", [0.2, 0.8])
@pytest.mark.parametrize("scheme", ["moment", "cell"])
def test_backends_agree(H, scheme):
    a = fr._compute_cell_weights(H, 48, "numba", scheme)
    b = fr._compute_cell_weights(H, 48, "numpy", scheme)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_weights_are_read_only():
    w = kernel_cell_weights(0.3, TimeGrid(8))
    with pytest.raises(ValueError):
        w.matrix[1, 0] = 0.0


def test_unknown_scheme():
    with pytest.raises(ValueError):
        kernel_cell_weights(0.3, TimeGrid(8), scheme="midpoint")


def test_cache_roundtrip(tmp_path):
    w = kernel_cell_weights(0.35, TimeGrid(12), cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1 and "H0.35_n12" in files[0].name
    again = kernel_cell_weights(0.35, TimeGrid(12), cache_dir=tmp_path)
    np.testing.assert_array_equal(w.matrix, again.matrix)
    loaded = KernelWeights.load(files[0])
    assert loaded.scheme == "moment" and loaded.version == fr.QUADRATURE_VERSION


def test_quadrature_error_names_cell(monkeypatch):
    def broken(*args):
        w = np.tril(np.ones((5, 4)), k=-1)
        w[3, 1] = np.nan
        return w

    monkeypatch.setattr(fr, "_cell_weights_numpy", broken)
    with pytest.raises(fr.QuadratureError) as err:
        fr._compute_cell_weights(0.3, 4, "numpy", "cell")
    assert err.value.cell == (3, 1)


# -- increments and paths ---------------------------------------------------

def test_increments_reproducible():
    g = TimeGrid(32)
    a = sample_increments(Stream(5, "x", 3), g)
    b = sample_increments(Stream(5, "x", 3), g)
    np.testing.assert_array_equal(a.dW, b.dW)
    assert len(a) == 32
    c = sample_increments(Stream(5, "x", 4), g)
    assert not np.array_equal(a.dW, c.dW)


def test_batch_matches_single_streams():
    g = TimeGrid(16)
    batch = sample_increment_batch(9, "paths", [0, 5, 2], g)
    for row, p in enumerate([0, 5, 2]):
        np.testing.assert_array_equal(batch.dW[row], sample_increments(Stream(9, "paths", p), g).dW)


def test_increment_moments():
    g = TimeGrid(8)
    x = sample_increment_batch(3, "m", np.arange(1250), g).dW.ravel()  # 10^4 draws
    assert abs(x.mean()) <= 3 * math.sqrt(g.dt / x.size)
    se_var = np.std(x ** 2, ddof=1) / math.sqrt(x.size)
    assert abs(np.var(x, ddof=1) - g.dt) <= 3 * se_var


def test_zero_increments_give_zero_path():
    w = kernel_cell_weights(0.3, TimeGrid(16))
    p = fbm_from_increments(w, Increments(np.zeros(16)))
    assert np.all(p.values == 0.0)


def test_half_path_is_cumulative_sum():
    w = kernel_cell_weights(0.5, TimeGrid(16))
    inc = sample_increments(Stream(1), w.grid)
    p = fbm_from_increments(w, inc)
    np.testing.assert_allclose(p.values, np.concatenate([[0.0], np.cumsum(inc.dW)]), atol=1e-15)


@pytest.mark.parametrize("H", [0.2, 0.7])
def test_path_coherence(H):
    w = kernel_cell_weights(H, TimeGrid(64))
    p = fbm_from_increments(w, sample_increment_batch(2, "c", np.arange(10), w.grid))
    assert p.values[:, 0].max() == 0.0
    np.testing.assert_allclose(p.values, p.dW @ (w.matrix / w.dt).T, atol=1e-12)


def test_grid_mismatch():
    w = kernel_cell_weights(0.3, TimeGrid(16))
    with pytest.raises(GridError):
        fbm_from_increments(w, Increments(np.zeros(8)))


@pytest.mark.parametrize("H", [0.3, 0.75])
def test_terminal_variance(H):
    w = kernel_cell_weights(H, TimeGrid(64))
    x = fbm_from_increments(w, sample_increment_batch(4, "v", np.arange(10000), w.grid)).values[:, -1]
    se = np.std(x ** 2, ddof=1) / math.sqrt(x.size)
    assert abs(np.mean(x ** 2) - 1.0) <= 3 * se


# -- Cholesky oracle --------------------------------------------------------

def test_hand_cholesky():
    L = cholesky_factor(0.5, TimeGrid(2))
    np.testing.assert_allclose(L, [[math.sqrt(0.5), 0.0], [math.sqrt(0.5), math.sqrt(0.5)]])


def test_cholesky_half_cumulative_sum():
    g = TimeGrid(4)
    z = np.array([0.3, -1.0, 2.0, 0.5])
    p = fbm_cholesky_oracle(0.5, g, None, normals=z)
    np.testing.assert_allclose(p.values, np.concatenate([[0.0], np.cumsum(z * math.sqrt(g.dt))]))
    assert p.oracle_grade


def test_cholesky_increments_back_solve():
    g = TimeGrid(32)
    p = fbm_cholesky_oracle(0.3, g, (1, "chol", np.arange(5)))
    np.testing.assert_allclose(p.values, p.dW @ p.weights.density.T, atol=1e-10)


def test_cholesky_without_increments():
    p = fbm_cholesky_oracle(0.3, TimeGrid(8), Stream(1), with_increments=False)
    assert p.increments is None
    with pytest.raises(ValueError):
        p.dW


def test_factorization_failure_reports_pivot(monkeypatch):
    monkeypatch.setattr(fr, "covariance_matrix", lambda h, g: np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(fr.FactorizationError) as err:
        cholesky_factor(0.3, TimeGrid(2))
    assert err.value.pivot == pytest.approx(-3.0)


def test_generators_second_moments_agree():
    g = TimeGrid(32)
    w = kernel_cell_weights(0.3, g)
    N = 10000
    a = fbm_from_increments(w, sample_increment_batch(8, "k", np.arange(N), g)).values[:, 1:]
    b = fbm_cholesky_oracle(0.3, g, (8, "c", np.arange(N)), w, with_increments=False).values[:, 1:]
    for x in (a, b):
        se_m = x.std(axis=0, ddof=1) / math.sqrt(N)
        assert np.all(np.abs(x.mean(axis=0)) <= 3 * se_m)
        se_v = (x ** 2).std(axis=0, ddof=1) / math.sqrt(N)
        assert np.all(np.abs((x ** 2).mean(axis=0) - g.nodes[1:] ** 0.6) <= 3 * se_v)


# -- operator ---------------------------------------------------------------

def test_operator_zero_and_half():
    w = kernel_cell_weights(0.3, TimeGrid(16))
    assert np.all(apply_fractional_operator(w, np.zeros(16)) == 0.0)
    h = kernel_cell_weights(0.5, TimeGrid(16))
    np.testing.assert_allclose(apply_fractional_operator(h, np.ones(16)), h.grid.nodes, atol=1e-15)


def test_operator_length_mismatch():
    with pytest.raises(GridError):
        apply_fractional_operator(kernel_cell_weights(0.3, TimeGrid(16)), np.ones(8))


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_operator_callable_against_mpmath(H):
    mpmath.mp.dps = 30
    w = kernel_cell_weights(H, TimeGrid(8))
    out = apply_fractional_operator(w, lambda s: s)
    for i in (1, 4, 8):
        t = mpmath.mpf(i) / 8
        ref = mpmath.quad(lambda s: mp_kernel(H, t, s) * s, [0, t / 1024, t / 2, t])
        assert out[i] == pytest.approx(float(ref), rel=1e-6)
    mpmath.mp.dps = 15


def test_operator_grid_function_converges_to_callable():
    f = lambda s: s  # noqa: E731
    w = kernel_cell_weights(0.3, TimeGrid(256), scheme="cell")
    exact = apply_fractional_operator(w, f)
    approx = apply_fractional_operator(w, w.grid.midpoints)
    assert np.max(np.abs(approx - exact)) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=16, max_size=16))
def test_cameron_martin_norm_is_l2(vals):
    w = kernel_cell_weights(0.3, TimeGrid(16))
    f = np.array(vals)
    assert cameron_martin_norm(w, f) == pytest.approx(math.sqrt(np.sum(f * f) / 16), abs=1e-12)
