import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracgirsanov.stats import (SampleSizeError, combine_chunks, mc_summarize,
                                paired_summary)


def test_constant_samples():
    s = mc_summarize(np.full(50, 2.0), target=2.0)
    assert s.se == 0.0 and s.z == 0.0 and s.within(3)
    assert mc_summarize(np.full(50, 2.0), target=1.0).z == math.inf


def test_two_point_example():
    s = mc_summarize([0.0, 2.0], target=1.0)
    assert s.mean == 1.0 and s.se == pytest.approx(1.0) and s.z == 0.0
    assert (s.lo, s.hi) == pytest.approx((-2.0, 4.0))


def test_standard_normals():
    x = np.random.default_rng(123).standard_normal(10000)
    s = mc_summarize(x)
    assert abs(s.z) <= 3
    assert s.se == pytest.approx(0.01, rel=0.05)


@pytest.mark.parametrize("x", [[], [1.0]])
def test_too_few_samples(x):
    with pytest.raises(SampleSizeError):
        mc_summarize(x)


def test_slack_widens_acceptance():
    s = mc_summarize([0.9, 1.1, 1.0, 1.0], target=2.0)
    assert not s.within(3)
    assert s.within(3, slack=1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200))
def test_paired_summary_is_difference(a):
    a = np.array(a)
    b = a[::-1].copy()
    p = paired_summary(a, b)
    d = a - b
    assert p.mean == pytest.approx(np.mean(d), abs=1e-9)
    assert p.se == pytest.approx(np.std(d, ddof=1) / math.sqrt(d.size), abs=1e-9)
    assert p.se >= 0


def test_paired_identical_samples_have_zero_z():
    a = np.random.default_rng(0).normal(size=100)
    assert paired_summary(a, a).z == 0.0


def test_combine_chunks_keeps_order():
    np.testing.assert_array_equal(combine_chunks([[1, 2], [3], [4, 5]]), [1, 2, 3, 4, 5])


def test_to_dict_fields():
    assert set(mc_summarize([1.0, 2.0]).to_dict()) == {"mean", "se", "n", "lo", "hi", "target", "z"}
