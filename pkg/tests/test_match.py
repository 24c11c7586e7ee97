import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntpevents.consolidate import ConsolidatedEvent
from ntpevents.match import (
    ExternalEvent,
    ExternalFormatError,
    classify_pair,
    load_external,
    match_events,
    write_external,
    write_match_report,
)

T0 = 1546300800.0


def b(prefix, s, e, cls="A", kind="event"):
    return ConsolidatedEvent(prefix, "c2s", kind, T0 + s, T0 + e, cls, {"S1"}, 1, 2)


def x(prefix, s, e):
    return ExternalEvent(prefix, T0 + s, T0 + e)


@pytest.mark.parametrize("bb,xx,expect", [
    ((0, 100), (50, 200), ("direct", 0.0)),
    ((0, 100), (100, 200), ("direct", 0.0)),        # shared endpoint
    ((0, 100), (3700, 3800), ("pre", 3600.0)),       # inclusive window edge
    ((0, 100), (3701, 3800), None),
    ((3700, 3800), (0, 100), ("post", 3600.0)),
    ((3701, 3800), (0, 100), None),
])
def test_classify_examples(bb, xx, expect):
    assert classify_pair(*bb, *xx) == expect


def oracle(bigben, external, window):
    out = set()
    for i, bv in enumerate(bigben):
        for j, xv in enumerate(external):
            if bv.prefix != xv.prefix or ":" in bv.prefix:
                continue
            if max(bv.start_epoch, xv.start_epoch) <= min(bv.end_epoch, xv.end_epoch):
                out.add((i, j, "direct"))
            elif 0 < xv.start_epoch - bv.end_epoch <= window:
                out.add((i, j, "pre"))
            elif 0 < bv.start_epoch - xv.end_epoch <= window:
                out.add((i, j, "post"))
    return out


prefixes = st.sampled_from(["10.0.0.0/24", "10.0.1.0/24", "2001:db8::/96"])
spans = st.tuples(prefixes, st.integers(0, 20000), st.integers(0, 5000))


@settings(max_examples=150, deadline=None)
@given(st.lists(spans, max_size=15), st.lists(spans, max_size=15), st.sampled_from([0, 600, 3600]))
def test_matching_equals_bruteforce(bs, xs, window):
    bigben = [b(p, s, s + d) for p, s, d in bs]
    external = [x(p, s, s + d) for p, s, d in xs]
    results, summary = match_events(bigben, external, window)
    assert {(r.bigben_index, r.external_index, r.match_type) for r in results} == oracle(bigben, external, window)
    pf = summary["prefixes"]
    assert pf["bigben"] == pf["shared"] + pf["bigben_only"]
    assert pf["external"] == pf["shared"] + pf["external_only"]
    assert summary["excluded_ipv6"]["bigben"] == sum(":" in p for p, _, _ in bs)
    for t in ("direct", "pre", "post"):
        assert summary["bigben_events_matched"][t] == len({r.bigben_index for r in results if r.match_type == t})


def test_ipv6_never_matched():
    res, summary = match_events([b("2001:db8::/96", 0, 10)], [x("2001:db8::/96", 0, 10)])
    assert res == [] and summary["excluded_ipv6"] == {"bigben": 1, "external": 1}


def test_summary_per_class_and_day():
    res, summary = match_events([b("10.0.0.0/24", 0, 10, "B"), b("10.0.0.0/24", 20, 30, "B")],
                                [x("10.0.0.0/24", 5, 25)])
    assert summary["per_class"] == {"B": {"direct": 2}}
    assert summary["per_day"] == {"2019-01-01": {"event_direct": 2, "external_direct": 1}}
    assert summary["pairs"]["direct"] == 2 and summary["external_events_matched"]["direct"] == 1


def test_external_file_round_trip_and_errors(tmp_path):
    evs = [x("10.0.0.0/24", 0, 10.5), x("10.0.1.0/24", 3, 4)]
    write_external(evs, tmp_path / "e.csv")
    assert load_external(tmp_path / "e.csv") == evs
    bad = tmp_path / "bad.csv"
    bad.write_text("prefix,start_epoch,end_epoch\n10.0.0.0/24,1,2\n10.0.0.0/24,zz,3\n")
    with pytest.raises(ExternalFormatError) as e:
        load_external(bad)
    assert e.value.line == 3 and "line 3" in str(e.value)
    bad.write_text("10.0.0.0/24,5,2\n")
    with pytest.raises(ExternalFormatError):
        load_external(bad)
    with pytest.raises(ValueError):
        load_external(bad, fmt="xml")


def test_report_file(tmp_path):
    bigben = [b("10.0.0.0/24", 0, 10)]
    external = [x("10.0.0.0/24", 100, 200)]
    res, summary = match_events(bigben, external)
    write_match_report(res, summary, bigben, external, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["matches"][0]["match_type"] == "pre" and doc["matches"][0]["gap_secs"] == 90.0
    assert doc["summary"]["window_secs"] == 3600.0
