import numpy as np
import pytest
from hypothesis import given, strategies as st

from recurrent_forest.events import SubjectRecord
from recurrent_forest.windows import (
    LongitudinalData, WindowGrid, capture_rate, checkin_times, recommend_spacing, transform)

from oracles import transform_bruteforce

GRID = WindowGrid(0, 60, 60, 240)
S1 = SubjectRecord("S1", (80.0, 203.0), 240.0)
S2 = SubjectRecord("S2", (), 125.0)
S3 = SubjectRecord("S3", (48.0, 62.0, 75.0, 147.0), 240.0)

# the eleven (subject, t, X, delta) tuples read off the worked figure
FIGURE1_ROWS = [
    ("S1", 0.0, 80.0, 1), ("S1", 60.0, 20.0, 1), ("S1", 120.0, 83.0, 1),
    ("S1", 180.0, 23.0, 1),
    ("S2", 0.0, 125.0, 0), ("S2", 60.0, 65.0, 0), ("S2", 120.0, 5.0, 0),
    ("S3", 0.0, 48.0, 1), ("S3", 60.0, 2.0, 1), ("S3", 120.0, 27.0, 1),
    ("S3", 180.0, 60.0, 0),
]


def test_grid_times():
    assert GRID.times().tolist() == [0, 60, 120, 180]


def test_checkin_rule():
    assert checkin_times(GRID, S2).tolist() == [0, 60, 120]
    assert checkin_times(GRID, S3).tolist() == [0, 60, 120, 180]
    assert checkin_times(GRID, SubjectRecord("x", (), 10.0)).tolist() == [0]


def test_figure1_rows_exact():
    rows = [tuple(r) for r in transform([S1, S2, S3], GRID)]
    assert rows == FIGURE1_ROWS


def test_event_at_checkin_gives_zero_residual():
    rows = transform([SubjectRecord("S", (60.0,), 240.0)], GRID).rows()
    assert rows[1] == ("S", 60.0, 0.0, 1)


def test_capture_rates():
    assert capture_rate([S3], GRID) == pytest.approx(3 / 4)
    assert capture_rate([S1, S3], GRID) == pytest.approx(5 / 6)
    dense = WindowGrid(0, 1, 1, 241)
    assert capture_rate([S1, S3], dense) == 1.0
    with pytest.raises(ValueError, match="no events"):
        capture_rate([S2], GRID)


def test_recommend_spacing():
    assert recommend_spacing([S3]) == pytest.approx(np.mean([14, 13, 72]) / 3)


def test_csv_round_trip():
    data = transform([S1, S2, S3], GRID)
    text = data.to_csv()
    assert text.splitlines()[0] == "subject_id,t,x,delta"
    assert LongitudinalData.from_csv(text).to_csv() == text


@st.composite
def subjects(draw):
    c = draw(st.floats(1, 500, allow_nan=False))
    ev = sorted(draw(st.sets(st.floats(0, c, allow_nan=False), max_size=8)))
    return SubjectRecord("S", tuple(ev), c)


@given(subjects(), st.floats(1, 100), st.floats(1, 100), st.floats(0, 50))
def test_matches_definition_and_invariants(rec, a, tau, t0):
    grid = WindowGrid(t0, a, tau, 600.0)
    rows = transform([rec], grid).rows()
    expected = transform_bruteforce(rec.event_times, rec.censoring_time,
                                    grid.times(), grid.end, tau)
    assert [(r.t, r.x, r.delta) for r in rows] == expected
    for r in rows:
        assert r.t < rec.censoring_time
        assert r.t + r.x <= rec.censoring_time + 1e-9
        assert r.delta == int(any(abs(r.t + r.x - e) < 1e-9 for e in rec.event_times)
                              and any(e >= r.t for e in rec.event_times))
    assert transform([rec], grid).to_csv() == transform([rec], grid).to_csv()
