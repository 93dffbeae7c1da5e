import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recurrent_forest.events import parse_covariates
from recurrent_forest.pseudo import (
    MissingCovariateError, PseudoDataset, WindowTooSmallError, build_pseudo_dataset,
    km_survival, pseudo_values)
from recurrent_forest.windows import LongitudinalData, transform

from oracles import km_bruteforce, pseudo_bruteforce
from test_windows import GRID, S1, S2, S3


def test_km_examples():
    assert km_survival([10, 20, 30, 40], [1, 0, 1, 1], 25) == 0.75
    assert km_survival([10, 30, 50, 70], [1, 1, 1, 1], 40) == 0.5
    assert km_survival([1, 2, 3], [1, 1, 0], 0) == 1.0


def test_km_tie_events_before_censoring():
    # the censored subject at 5 is still at risk for the event at 5
    assert km_survival([5, 5, 9], [1, 0, 1], 6) == pytest.approx(2 / 3)


def test_km_flat_when_risk_set_exhausted():
    assert km_survival([2, 4], [1, 0], 10) == 0.5


@pytest.mark.parametrize("method", ["direct", "vectorized"])
def test_pseudo_examples(method):
    assert np.allclose(pseudo_values([10, 20, 30, 40], [1, 0, 1, 1], 25, method), [0, 1, 1, 1])
    assert np.allclose(pseudo_values([10, 30, 50, 70], [1, 1, 1, 1], 40, method), [0, 0, 1, 1])
    assert np.allclose(pseudo_values([5, 5], [1, 1], 10, method), [0, 0])


def test_window_too_small():
    with pytest.raises(WindowTooSmallError):
        pseudo_values([3.0], [1], 5)


windows = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(1, 20), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.integers(0, 22)))


@given(windows)
def test_km_matches_bruteforce(w):
    x, d, tau = w
    assert abs(km_survival(x, d, tau) - km_bruteforce(x, d, tau)) <= 1e-12


@given(windows)
def test_pseudo_matches_bruteforce_and_methods_agree(w):
    x, d, tau = w
    direct = pseudo_values(x, d, tau, "direct")
    assert np.allclose(direct, pseudo_bruteforce(x, d, tau), atol=1e-12, rtol=0)
    assert np.allclose(pseudo_values(x, d, tau, "vectorized"), direct, atol=1e-10, rtol=0)


def _beyond_last_event_after_censoring(x, d, tau):
    # the one configuration where leaving out the largest point changes the tail
    o = np.argsort(x, kind="stable")
    x, d = np.asarray(x)[o], np.asarray(d)[o]
    last = x == x[-1]
    return tau > x[-1] and d[last].any() and not d[x == x[~last].max()].all() \
        if (~last).any() else False


@given(windows)
def test_jackknife_mean_identity(w):
    x, d, tau = w
    if _beyond_last_event_after_censoring(x, d, tau):
        return
    pv = pseudo_values(x, d, tau)
    assert abs(pv.mean() - km_survival(x, d, tau)) <= 1e-10


def test_jackknife_mean_exception_beyond_follow_up():
    # last point an event, the one before it censored, tau past both: leaving
    # out the event keeps the curve flat instead of dropping it to zero
    x, d = [1.0, 2.0, 3.0], [1, 0, 1]
    assert km_survival(x, d, 5) == 0.0
    assert np.allclose(pseudo_values(x, d, 5), pseudo_bruteforce(x, d, 5))
    assert pseudo_values(x, d, 5).mean() < 0


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=40), st.floats(0, 11))
def test_uncensored_reduces_to_indicator(x, tau):
    pv = pseudo_values(x, np.ones(len(x), dtype=int), tau)
    assert np.allclose(pv, np.asarray(x) >= tau, atol=1e-12, rtol=0)


def _figure1():
    return transform([S1, S2, S3], GRID)


def test_build_on_figure1_windows():
    panel = parse_covariates("subject_id,z\nS1,1\nS2,2\nS3,3\n")
    ds = build_pseudo_dataset(_figure1(), 60, panel)
    assert len(ds) == 11
    assert [int(np.sum(ds.t == u)) for u in (0, 60, 120, 180)] == [3, 3, 3, 2]
    assert ds.feature_names == ["z", "t"]
    assert np.array_equal(ds.features()[:, -1], ds.t)
    assert PseudoDataset.from_csv(ds.to_csv()).to_csv() == ds.to_csv()


def test_all_censored_after_tau_gives_ones():
    data = LongitudinalData(np.array(["a", "b", "c"], dtype=object), np.zeros(3),
                            np.array([70.0, 80.0, 90.0]), np.zeros(3, dtype=np.int64))
    assert np.all(build_pseudo_dataset(data, 60).y == 1.0)


def test_single_subject_fails():
    with pytest.raises(WindowTooSmallError):
        build_pseudo_dataset(transform([S3], GRID), 60)


def test_missing_covariate_cells_listed():
    panel = parse_covariates("subject_id,t,z\nS1,0,1\n", grid=[0, 60, 120, 180])
    with pytest.raises(MissingCovariateError) as e:
        build_pseudo_dataset(transform([S1, S3], GRID), 60, panel)
    assert ("S1", 60.0, "z") in e.value.cells


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_random_exponential_windows(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 51)
    t = rng.exponential(1.0, n)
    c = rng.exponential(1.5, n)
    x, d = np.minimum(t, c), (t <= c).astype(int)
    tau = rng.uniform(0, x.max())
    assert abs(km_survival(x, d, tau) - km_bruteforce(x, d, tau)) <= 1e-12
    assert abs(pseudo_values(x, d, tau, "vectorized").mean() - km_survival(x, d, tau)) <= 1e-10
