import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_paths
from fracgirsanov.fractional import (GridError, SamplePath, TimeGrid, fbm_cholesky_oracle,
                                     kernel_cell_weights)
from fracgirsanov.malliavin import (CylindricalFunctional, StepProcess, compose,
                                    constant_functional, derivative_field,
                                    deterministic_process, directional_derivative,
                                    eval_functional, finite_difference_directional,
                                    skorokhod_integral, sobolev_norms, sobolev_samples,
                                    zero_process)
from fracgirsanov.registry import DUALITY_SUITE, RegistryError, functional, step_process
from fracgirsanov.stats import mc_summarize


def single_path(values, H=0.3):
    w = kernel_cell_weights(H, TimeGrid(len(values) - 1))
    return SamplePath(w.grid, np.asarray(values, dtype=float), weights=w)


# -- functionals ------------------------------------------------------------

def test_eval_examples():
    p = single_path([0.0, 0.4, -0.3, 0.0])
    assert eval_functional(functional("cos@1.0"), p) == pytest.approx(1.0)
    assert eval_functional(constant_functional(2.5), p) == 2.5
    assert eval_functional(functional("id@0.6666666666666666"), p) == pytest.approx(-0.3)


def test_off_grid_anchor():
    p = single_path(np.zeros(9))
    with pytest.raises(GridError):
        eval_functional(functional("cos@0.3"), p)


@pytest.mark.parametrize("anchors", [(0.0,), (0.5, 0.5), (0.7, 0.2), (1.2,)])
def test_anchor_validation(anchors):
    with pytest.raises(ValueError):
        CylindricalFunctional(anchors, np.sum)


@pytest.mark.parametrize("key", ["foo@1.0", "cos", "cos@x", "a*cos@1.0", "const:abc"])
def test_registry_rejects(key):
    with pytest.raises(RegistryError):
        functional(key)


@pytest.mark.parametrize("key", ["cos@1.0", "sin@0.5", "gauss@0.75", "atan@0.25,1.0",
                                 "0.5*cos@0.5,1.0", "tanh@0.25,0.75"])
def test_registry_within_bounds(key):
    F = functional(key)
    x = np.random.default_rng(0).normal(scale=3.0, size=(2000, F.k))
    assert np.all(np.abs(F.value(x)) <= F.bound + 1e-15)
    assert np.all(np.sum(np.abs(F.gradient(x)), axis=-1) <= F.grad_bound + 1e-15)
    fd = CylindricalFunctional(F.anchors, F.g)
    np.testing.assert_allclose(fd.gradient(x[:50]), F.gradient(x[:50]), atol=1e-8)
    assert fd.oracle_grade and not F.oracle_grade


# -- derivative -------------------------------------------------------------

def test_constant_derivative_is_zero(paths_h03):
    D = derivative_field(constant_functional(3.0), paths_h03).values
    assert D.shape == (200, 64) and np.all(D == 0.0)


def test_half_derivative_is_indicator():
    paths = make_paths(0.5, 16, 5)
    F = functional("sin@0.5")
    D = derivative_field(F, paths).values
    expected = np.cos(paths.values[:, 8])[:, None] * (np.arange(16) < 8)
    np.testing.assert_allclose(D, expected, atol=1e-15)


@pytest.mark.parametrize("key", ["cos@1.0", "gauss@0.75", "atan@0.25,1.0"])
def test_directional_matches_finite_difference(paths_h03, key):
    G = functional(key)
    h = np.ones(64)
    p = paths_h03[:20]
    exact = directional_derivative(G, p, h)
    fd = finite_difference_directional(G, p, h, eps=1e-4)
    # relative to the batch scale of the pairing
    assert np.max(np.abs(fd - exact)) <= 0.01 * np.max(np.abs(exact))


def test_directional_zero_and_linear(paths_h07):
    G = functional("0.5*cos@0.5,1.0")
    rng = np.random.default_rng(3)
    h1, h2 = rng.normal(size=(2, 64))
    p = paths_h07[:10]
    assert np.all(directional_derivative(G, p, np.zeros(64)) == 0.0)
    np.testing.assert_allclose(directional_derivative(G, p, h1 + h2),
                               directional_derivative(G, p, h1) + directional_derivative(G, p, h2),
                               atol=1e-13)


def test_derivative_in_span_of_kernel_rows(paths_h03):
    G = CylindricalFunctional(
        (0.25, 1.0), lambda x: np.sin(x[..., 0]) * np.cos(x[..., 1]),
        lambda x: np.stack([np.cos(x[..., 0]) * np.cos(x[..., 1]),
                            -np.sin(x[..., 0]) * np.sin(x[..., 1])], axis=-1))
    D = derivative_field(G, paths_h03).values
    s = np.linalg.svd(D, compute_uv=False)
    assert np.sum(s > 1e-10 * s[0]) == 2
    rows = paths_h03.weights.density[[16, 64]]
    coef, *_ = np.linalg.lstsq(rows.T, D.T, rcond=None)
    np.testing.assert_allclose(coef.T @ rows, D, atol=1e-12)


def test_chain_rule():
    paths = make_paths(0.35, 32, 50)
    G1, G2 = functional("sin@0.5"), functional("gauss@0.25,1.0")
    outer = lambda y: np.tanh(y[..., 0]) * y[..., 1]  # noqa: E731
    outer_grad = lambda y: np.stack([y[..., 1] / np.cosh(y[..., 0]) ** 2,  # noqa: E731
                                     np.tanh(y[..., 0])], axis=-1)
    C = compose(outer, outer_grad, [G1, G2])
    y = np.stack([G1(paths), G2(paths)], axis=-1)
    dy = outer_grad(y)
    expected = (dy[:, :1] * derivative_field(G1, paths).values
                + dy[:, 1:] * derivative_field(G2, paths).values)
    np.testing.assert_allclose(derivative_field(C, paths).values, expected, atol=1e-12)


def test_process_derivative_matrix(paths_h03):
    u = step_process("0.5*sin@0.5:ramp")
    D = derivative_field(u, paths_h03[:3]).values
    assert D.shape == (3, 64, 64)
    # column t is p(t) * D F
    F = functional("0.5*sin@0.5")
    DF = derivative_field(F, paths_h03[:3]).values
    t = paths_h03.grid.midpoints
    np.testing.assert_allclose(D, DF[:, :, None] * t[None, None, :], atol=1e-14)


# -- Skorokhod --------------------------------------------------------------

def test_deterministic_integrand_is_wiener_sum(paths_h03):
    h = np.linspace(-1, 1, 64)
    d = skorokhod_integral(deterministic_process(h), paths_h03)
    np.testing.assert_allclose(d, paths_h03.dW @ h, atol=1e-13)
    half = skorokhod_integral(deterministic_process(h), paths_h03, t=0.5)
    np.testing.assert_allclose(half, paths_h03.dW[:, :32] @ h[:32], atol=1e-13)


def test_zero_integrand(paths_h07):
    assert np.all(skorokhod_integral(zero_process(), paths_h07) == 0.0)


def test_missing_increments_rejected():
    p = fbm_cholesky_oracle(0.3, TimeGrid(8), (1, "x", np.arange(3)), with_increments=False)
    with pytest.raises(ValueError, match="increments"):
        skorokhod_integral(step_process("sin@0.5"), p)


def test_off_grid_time(paths_h03):
    with pytest.raises(GridError):
        skorokhod_integral(step_process("sin@0.5"), paths_h03, t=0.3)


@pytest.fixture(scope="module")
def duality_paths():
    return make_paths(0.3, 32, 10000, seed=11, tag="duality")


@pytest.mark.parametrize("G_key,u_key", DUALITY_SUITE)
def test_duality(duality_paths, G_key, u_key):
    G, u = functional(G_key), step_process(u_key)
    lhs = G(duality_paths) * skorokhod_integral(u, duality_paths)
    rhs = derivative_field(G, duality_paths).pair(u.on_path(duality_paths))
    assert mc_summarize(lhs - rhs).within(3)


@pytest.mark.parametrize("u_key", ["sin@0.5", "0.5*cos@1.0", "tanh@0.25,0.75"])
def test_skorokhod_mean_zero(duality_paths, u_key):
    assert mc_summarize(skorokhod_integral(step_process(u_key), duality_paths)).within(3)


def test_anticipating_integrand_needs_correction():
    # the derivative correction is what centres an anticipating integral
    paths = make_paths(0.5, 32, 10000, seed=4)
    u = step_process("id@1.0")
    naive = np.sum(u.on_path(paths) * paths.dW, axis=-1)
    assert not mc_summarize(naive).within(3)
    assert mc_summarize(skorokhod_integral(u, paths)).within(3)


# -- Sobolev norms ----------------------------------------------------------

def test_sobolev_zero(paths_h03):
    est = sobolev_norms(zero_process(), paths_h03)
    assert est.norm_12 == 0.0 and est.norm_1inf == 0.0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=16, max_size=16))
def test_sobolev_deterministic(h):
    paths = make_paths(0.3, 16, 4)
    h = np.array(h)
    est = sobolev_norms(deterministic_process(h), paths)
    assert est.norm_12 == pytest.approx(math.sqrt(np.sum(h * h) / 16), abs=1e-12)
    assert est.se_12 == 0.0


@pytest.mark.parametrize("u_key", ["sin@0.5", "0.8*cos@1.0", "tanh@0.25,0.75",
                                   "0.6*sin@0.75:decay", "id@0.5"])
def test_divergence_bound(duality_paths, u_key):
    u = step_process(u_key)
    d2 = skorokhod_integral(u, duality_paths) ** 2
    norm = sobolev_samples(u, duality_paths)
    a, b = mc_summarize(d2), mc_summarize(norm)
    assert a.mean <= b.mean + 3 * math.hypot(a.se, b.se)
    assert sobolev_norms(u, duality_paths).norm_12 ** 2 == pytest.approx(b.mean)


def test_step_process_cell_functional(paths_h03):
    u = step_process("0.5*sin@0.5:ramp")
    F = u.cell(10, paths_h03.grid)
    np.testing.assert_allclose(F(paths_h03), u.on_path(paths_h03)[:, 10], atol=1e-15)


def test_from_functional_without_gradient_is_oracle_grade():
    F = CylindricalFunctional((0.5,), lambda x: np.sin(x[..., 0]))
    assert StepProcess.from_functional(F).oracle_grade
