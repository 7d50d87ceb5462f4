import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specclip.closedform import (
    autocorrelations,
    closed_form_spectrum,
    duplicate_check,
    gap_stats_csv,
    padding_gap_experiment,
    spectral_bounds,
)
from specclip.linops import InvariantError, circular_conv1d
from specclip.spectral import make_rng, svd_oracle

SQ2 = np.sqrt(2.0)


def test_pair_filter():
    res = closed_form_spectrum([1.0, 1.0], 4)
    np.testing.assert_allclose(res.sorted(), [2.0, SQ2, SQ2, 0.0], atol=1e-12)
    np.testing.assert_allclose(res.per_channel_c, [[2.0, 1.0]])
    np.testing.assert_allclose(res.sorted(), svd_oracle(circular_conv1d([1.0, 1.0], 4)), atol=1e-12)


def test_two_unit_filters():
    res = closed_form_spectrum([[1.0, 0.0], [0.0, 1.0]], 2)
    np.testing.assert_allclose(res.sigmas, [SQ2, SQ2])
    np.testing.assert_allclose(svd_oracle(circular_conv1d([[1.0, 0.0], [0.0, 1.0]], 2)), [SQ2, SQ2], atol=1e-12)


def test_scalar_filter():
    np.testing.assert_allclose(closed_form_spectrum([-2.5], 7).sigmas, np.full(7, 2.5))


def test_filter_longer_than_signal():
    with pytest.raises(InvariantError):
        closed_form_spectrum([1.0, 2.0, 3.0], 2)


def test_bounds_examples():
    b = spectral_bounds([1.0, 1.0])
    assert (b.lower, b.upper) == (2.0, 2.0)
    b = spectral_bounds([1.0, -1.0])
    assert (b.lower, b.upper) == (0.0, 2.0)
    assert closed_form_spectrum([1.0, -1.0], 4).sorted()[0] == pytest.approx(2.0)
    b = spectral_bounds([[1.0, 1.0], [2.0, 2.0]])
    assert b.lower == pytest.approx(np.sqrt(20)) and b.upper == pytest.approx(np.sqrt(20))
    assert closed_form_spectrum([[1.0, 1.0], [2.0, 2.0]], 6).sorted()[0] == pytest.approx(np.sqrt(20))


def test_duplicate_examples():
    assert duplicate_check(closed_form_spectrum([1.0, 1.0], 4)) == 2
    assert duplicate_check(closed_form_spectrum([3.0], 5)) == 0


def test_autocorrelation():
    np.testing.assert_allclose(autocorrelations([1.0, 2.0, 3.0]), [[14.0, 8.0, 3.0]])


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 4), k=st.integers(1, 5), extra=st.integers(0, 20), seed=st.integers(0, 2**20),
       orient=st.sampled_from(["out", "in"]))
def test_matches_oracle(m, k, extra, seed, orient):
    f = make_rng(seed).standard_normal((m, k))
    n = k + extra
    res = closed_form_spectrum(f, n)
    np.testing.assert_allclose(res.sorted(), svd_oracle(circular_conv1d(f, n, orient))[:n], atol=1e-8)
    b = spectral_bounds(f)
    assert b.lower <= res.sigmas.max() + 1e-12 and res.sigmas.max() <= b.upper + 1e-12
    # the omega = 1 root evaluates to the lower bound exactly
    assert res.sigmas[0] == pytest.approx(b.lower, abs=1e-12)
    assert duplicate_check(closed_form_spectrum(f[:1], n)) <= 2


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 4), k=st.integers(1, 5), n=st.integers(5, 40), seed=st.integers(0, 2**20))
def test_nonnegative_filters_attain_bounds(m, k, n, seed):
    f = np.abs(make_rng(seed).standard_normal((m, k)))
    b = spectral_bounds(f)
    top = closed_form_spectrum(f, n).sigmas.max()
    assert abs(b.lower - top) <= 1e-10 and abs(b.upper - top) <= 1e-10


def test_gap_trivial_cases():
    zero = np.zeros((1, 2, 2, 3, 3))
    for s in padding_gap_experiment(3, 2, 6, 1, 0, kernels=zero):
        assert s.mean_gap == 0.0
    for s in padding_gap_experiment(1, 2, 6, 3, 0):
        assert s.max_gap <= 1e-9


def test_gap_csv_columns():
    stats = padding_gap_experiment(3, 1, 8, 2, 11)
    lines = gap_stats_csv(stats).splitlines()
    assert lines[0] == "padding,channels,kernel,mean_gap,max_gap"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["zeros", "reflect", "replicate"]


def test_spectrum_csv():
    text = closed_form_spectrum([1.0, 1.0], 4).to_csv()
    assert text.splitlines()[0] == "j,sigma" and len(text.splitlines()) == 5
