import numpy as np
import pytest
from hypothesis import given, strategies as st

from recurrent_forest.evaluation import (
    ScoredRows, bootstrap_se, concordance_counts, harrell_c, rubin_combine)

from oracles import c_all_pairs


def rows(x, d, score, sid=None, t=None):
    n = len(x)
    sid = np.arange(n).astype(str) if sid is None else np.asarray(sid)
    t = np.zeros(n) if t is None else np.asarray(t, float)
    return ScoredRows(sid, t, np.asarray(x, float), np.asarray(d), np.asarray(score, float))


def test_three_row_example():
    assert harrell_c(rows([5, 10, 7], [1, 1, 0], [0.2, 0.9, 0.5])) == 1.0


def test_perfect_and_reversed():
    x = np.arange(1.0, 51)
    assert harrell_c(rows(x, np.ones(50), x)) == 1.0
    assert harrell_c(rows(x, np.ones(50), -x)) == 0.0


def test_random_scores_near_half():
    rng = np.random.default_rng(0)
    assert abs(harrell_c(rows(rng.exponential(size=2000), np.ones(2000), rng.random(2000)))
               - 0.5) < 0.02


def test_no_comparable_pairs():
    with pytest.raises(ValueError):
        harrell_c(rows([1, 2], [0, 0], [0.1, 0.2]))


fixtures = st.integers(2, 50).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 12), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.integers(0, 6), min_size=n, max_size=n)))


@given(fixtures)
def test_matches_all_pairs_oracle(f):
    x, d, s = f
    comp, *_ = concordance_counts(x, d, s)
    if comp == 0:
        return
    assert harrell_c(rows(x, d, s)) == c_all_pairs(x, d, s)


@given(fixtures)
def test_rank_invariance_and_symmetry(f):
    x, d, s = f
    if concordance_counts(x, d, s)[0] == 0:
        return
    s = np.asarray(s, float)
    c = harrell_c(rows(x, d, s))
    assert harrell_c(rows(x, d, np.exp(s) * 3 + 1)) == c
    assert harrell_c(rows(x, d, -s)) == pytest.approx(1 - c, abs=1e-12)


def test_within_t_only_compares_same_checkin():
    r = rows([1, 5, 2, 3], [1, 1, 1, 1], [0.1, 0.9, 0.9, 0.1], t=[0, 0, 60, 60])
    assert harrell_c(r, within_t=True) == 0.5
    assert harrell_c(r) == c_all_pairs([1, 5, 2, 3], [1, 1, 1, 1], [0.1, 0.9, 0.9, 0.1])


def test_bootstrap_constant_metric():
    r = rows([1, 2, 3], [1, 1, 1], [1, 2, 3])
    assert bootstrap_se(lambda _: 0.7, r, 20, 0).se == 0.0


def test_bootstrap_mean_matches_analytic_se():
    rng = np.random.default_rng(5)
    v = rng.normal(size=200)
    r = rows(np.ones(200), np.ones(200), v)
    se = bootstrap_se(lambda rr: rr.score.mean(), r, 500, 1).se
    assert abs(se / (v.std(ddof=1) / np.sqrt(200)) - 1) < 0.15


def test_bootstrap_moves_subject_rows_together():
    sid = np.repeat(["a", "b", "c"], 2)
    r = rows(np.arange(6.0), np.ones(6), np.arange(6.0), sid=sid)

    def metric(rr):
        # each subject contributes exactly its two rows per draw
        _, counts = np.unique(rr.subject_id, return_counts=True)
        assert np.all(counts % 2 == 0)
        return float(len(rr))

    assert bootstrap_se(metric, r, 10, 0).se == 0.0


def test_bootstrap_redraws_and_determinism():
    r = rows([1, 2, 3, 4], [1, 0, 0, 0], [0.1, 0.2, 0.3, 0.4])
    a = bootstrap_se(harrell_c, r, 30, 3)
    b = bootstrap_se(harrell_c, r, 30, 3)
    assert a.redraws > 0 and np.array_equal(a.values, b.values)


def test_rubin_example():
    p = rubin_combine([0.6, 0.62, 0.58], [0.01] * 3)
    assert p.estimate == pytest.approx(0.6)
    assert p.total == pytest.approx(0.01 + (4 / 3) * 0.0004, abs=1e-15)
    assert p.total == pytest.approx(0.010533, abs=1e-6)


def test_rubin_identical_and_errors():
    p = rubin_combine([0.7] * 10, [0.02] * 10)
    assert p.between == 0 and p.total == pytest.approx(0.02)
    with pytest.raises(ValueError):
        rubin_combine([0.5], [0.1])


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=12),
       st.randoms(use_true_random=False))
def test_rubin_order_invariant(pairs, rnd):
    q, u = zip(*pairs)
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    q2, u2 = zip(*shuffled)
    assert rubin_combine(q, u) == rubin_combine(q2, u2)
