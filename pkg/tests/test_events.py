import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntpevents.detect import class_for_correlation, classify_event, extract_events, zscore_outliers
from ntpevents.detect.events import EventRun, best_class


def test_no_false_no_events():
    assert extract_events([True] * 3, [0, 64, 128], 64) == []


def test_single_spike_bounds():
    (ev,) = extract_events([True, False, True], [1000, 1064, 1128], 64)
    assert (ev.start_epoch, ev.end_epoch, ev.kind, ev.outlier_bins) == (1064, 1128, "single_spike", (1,))


def test_event_and_spike():
    evs = extract_events([False, False, True, False], [0, 64, 128, 192], 64)
    assert [(e.kind, e.outlier_bins, e.start_epoch, e.end_epoch) for e in evs] == [
        ("event", (0, 1), 0, 128), ("single_spike", (3,), 192, 256)]


def test_runs_split_across_removed_rows():
    # retained rows 0,1,3,4 of the grid; row 2 was all-NA
    bins = np.array([0, 1, 3, 4])
    evs = extract_events([False, False, False, False], bins * 64.0, 64, bin_index=bins)
    assert [e.outlier_bins for e in evs] == [(0, 1), (2, 3)]
    bridged = extract_events([False] * 4, bins * 64.0, 64, bin_index=bins, bridge_gaps=1)
    assert [e.outlier_bins for e in bridged] == [(0, 1, 2, 3)]


def runs_oracle(flags, grid):
    out, cur = [], []
    for i, f in enumerate(flags):
        if not f and cur and grid[i] == grid[cur[-1]] + 1:
            cur.append(i)
        else:
            if cur:
                out.append(tuple(cur))
            cur = [] if f else [i]
    if cur:
        out.append(tuple(cur))
    return out


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 3)), min_size=1, max_size=60))
def test_run_extraction_bijection(data):
    flags = [f for f, _ in data]
    grid = np.cumsum([g for _, g in data])
    evs = extract_events(flags, grid * 64.0, 64, bin_index=grid)
    assert [e.outlier_bins for e in evs] == runs_oracle(flags, grid)
    assert sum(len(e.outlier_bins) for e in evs) == flags.count(False)
    for e in evs:
        assert (e.kind == "single_spike") == (len(e.outlier_bins) == 1)
        assert e.end_epoch >= e.start_epoch


def test_zscore_examples():
    X = np.ones((10, 1))
    assert not zscore_outliers(X).any()
    col = np.array([1, 1, 1, 1, 1, 1, 1, 1, 1, 10.0])[:, None]
    z = (col - col.mean()) / col.std()
    assert abs(z[-1, 0]) == pytest.approx(3.0) and abs(z[0, 0]) == pytest.approx(1 / 3)
    assert zscore_outliers(col).tolist() == [False] * 9 + [True]
    assert not zscore_outliers(np.array([[1.0], [2.0], [3.0]])).any()


def test_zscore_any_client():
    X = np.column_stack([np.ones(10), [1, 1, 1, 1, 1, 1, 1, 1, 1, 10.0]])
    assert zscore_outliers(X)[-1]


@pytest.mark.parametrize("corr,cls", [
    (1.0, "A"), (0.8, "A"), (0.75, "B"), (0.6, "B"), (0.5, "C"), (0.3, "C"), (0.25, "D"), (0.0, "D")])
def test_class_boundaries(corr, cls):
    assert class_for_correlation(corr) == cls


@pytest.mark.parametrize("hits,cls", [(4, "A"), (3, "B"), (2, "C"), (1, "D"), (0, "D")])
def test_classify_event_four_bins(hits, cls):
    flags = np.array([True, False, False, False, False, True])
    z = np.zeros(6, dtype=bool)
    z[1:1 + hits] = True
    ev = EventRun(0, 1, "event", (1, 2, 3, 4))
    assert classify_event(ev, flags, z) == cls


def test_best_class():
    assert best_class(["C", "A", "B"]) == "A"
    assert best_class(["D", "C"]) == "C"
