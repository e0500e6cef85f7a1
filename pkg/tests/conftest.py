import numpy as np
import pytest

from fracgirsanov import _accel
from fracgirsanov.fractional import (TimeGrid, fbm_from_increments, kernel_cell_weights,
                                     sample_increment_batch)


def make_paths(hurst, n, N, seed=1, tag="test"):
    w = kernel_cell_weights(hurst, TimeGrid(n))
    return fbm_from_increments(w, sample_increment_batch(seed, tag, np.arange(N), w.grid))


@pytest.fixture(params=["numba", "numpy"])
def each_backend(request, monkeypatch):
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    monkeypatch.setenv(_accel.ENV_FLAG, request.param)
    return request.param


@pytest.fixture(scope="session")
def paths_h03():
    return make_paths(0.3, 64, 200)


@pytest.fixture(scope="session")
def paths_h07():
    return make_paths(0.7, 64, 200)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
