import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntpevents.ingest import NtpPacketRecord, records_to_frame
from ntpevents.owd import (
    C2S,
    S2C,
    ClientSeries,
    classify_polling,
    client_prefix,
    cluster_prefixes,
    extract_owd_streams,
    filter_and_cluster,
    label_clients,
    read_clusters,
    sort_temporal,
    tight_sync_filter,
    write_clusters,
)
from ntpevents.synth import SynthScenario, generate_frame

SERVER = "192.0.2.1"


def rec(src, t, lat=0.01, rd=0.02, poll=6, dst=SERVER, mode=3):
    return NtpPacketRecord(1, src, dst, lat, poll, t, rd, lat + rd, "GPS", mode)


def series(ts, polls=6, owd=None):
    ts = np.asarray(ts, dtype=float)
    polls = np.full(len(ts), polls) if np.isscalar(polls) else np.asarray(polls)
    owd = np.zeros(len(ts)) if owd is None else np.asarray(owd, dtype=float)
    return ClientSeries("10.0.0.1", C2S, ts, owd, polls)


def test_no_mode3_packets():
    assert extract_owd_streams([rec("10.0.0.1", 1.0, mode=4)], SERVER) == {}
    assert extract_owd_streams([rec("10.0.0.1", 1.0, dst="192.0.2.99")], SERVER) == {}


def test_one_client_three_packets_direction_fields():
    rs = [rec("10.0.0.1", t, lat=0.001 * t, rd=0.002 * t) for t in (1.0, 2.0, 3.0)]
    (c2s, s2c), = extract_owd_streams(rs, SERVER).values()
    assert len(c2s) == len(s2c) == 3
    assert c2s.direction == C2S and s2c.direction == S2C
    np.testing.assert_array_equal(c2s.owd, [0.002, 0.004, 0.006])
    np.testing.assert_array_equal(s2c.owd, [0.001, 0.002, 0.003])
    np.testing.assert_array_equal(c2s.timestamps, s2c.timestamps)


def test_multiple_server_addresses():
    rs = [rec("10.0.0.1", 1.0), rec("2001:db8::1", 1.0, dst="2001:db8:ffff::1")]
    assert set(extract_owd_streams(rs, [SERVER, "2001:db8:ffff::1"])) == {"10.0.0.1", "2001:db8::1"}


def test_synth_streams_match_emission_schedule():
    sc = SynthScenario(prefixes=[("10.0.0.0/24", 3)], duration=3600, seed=2, poll_exponents=[5, 6])
    frame, _ = generate_frame(sc)
    streams = extract_owd_streams(frame, SERVER)
    assert sum(len(c) for c, _ in streams.values()) == len(frame)
    for ip, (c2s, s2c) in streams.items():
        rows = frame[frame.src_ip == ip]
        np.testing.assert_array_equal(c2s.timestamps, rows.packet_timestamp.to_numpy())
        np.testing.assert_array_equal(c2s.owd, rows.root_delay.to_numpy())
        np.testing.assert_array_equal(s2c.owd, rows.latency.to_numpy())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["10.0.0.1", "10.0.0.2", "10.0.1.3"]), st.integers(0, 50),
                          st.sampled_from([3, 4])), max_size=40))
def test_extraction_conserves_samples(rows):
    rs = [rec(ip, float(t), mode=m) for ip, t, m in rows]
    streams = extract_owd_streams(rs, SERVER)
    n3 = sum(1 for _, _, m in rows if m == 3)
    assert sum(len(c) for c, _ in streams.values()) == n3
    assert sum(len(s) for _, s in streams.values()) == n3


def test_sort_temporal_examples():
    s = series([1, 2, 3], owd=[1, 2, 3])
    assert sort_temporal(s).owd.tolist() == [1, 2, 3]
    r = series([3, 2, 1], owd=[3, 2, 1])
    assert sort_temporal(r).owd.tolist() == [1, 2, 3]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=30))
def test_sort_temporal_stable_property(ts):
    s = series(ts, owd=list(range(len(ts))))
    out = sort_temporal(s)
    expected = sorted(range(len(ts)), key=lambda i: ts[i])  # Python sort is stable
    assert out.owd.tolist() == expected


@pytest.mark.parametrize("polls,cls", [
    ([6, 6, 6], "constant"), ([4, 5, 6, 6], "increasing"), ([8, 7, 7, 6], "decreasing"),
    ([6, 4, 7, 5], "variable"), ([5], "constant"),
])
def test_classify_polling(polls, cls):
    assert classify_polling(polls) == cls


def test_classify_polling_empty():
    with pytest.raises(ValueError):
        classify_polling([])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 17), min_size=1, max_size=12), st.data())
def test_classify_polling_duplication_invariant(polls, data):
    dup = []
    for p in polls:
        dup += [p] * data.draw(st.integers(1, 3))
    assert classify_polling(dup) == classify_polling(polls)


def test_ts_filter_examples():
    assert tight_sync_filter(series(np.arange(20) * 64.0))
    assert not tight_sync_filter(series([0, 64, 128]))
    # constant poll but observed for less than 4 intervals
    assert not tight_sync_filter(series(np.arange(12) * 64.0, polls=10))


def test_ts_filter_variable_spacing_mad():
    # spacings alternate 60/100: median 80, MAD 20 = 25% -> accepted
    ok = np.cumsum([0] + [60, 100] * 6)
    assert tight_sync_filter(series(ok, polls=[6, 7] * 6 + [6]))
    # spacings 48/112: median 80, MAD 32 = 40% -> rejected
    bad = np.cumsum([0] + [48, 112] * 6)
    spacing = np.diff(bad)
    mad = np.median(np.abs(spacing - np.median(spacing)))
    assert mad / np.median(spacing) == pytest.approx(0.4)
    assert not tight_sync_filter(series(bad, polls=[6, 7] * 6 + [6]))


def test_ts_filter_increasing_hold():
    polls = [4] * 6 + [6] * 6
    ts = np.cumsum([0] + [16] * 6 + [64] * 5)
    assert tight_sync_filter(series(ts, polls=polls))
    polls = [4] * 11 + [6]
    ts = np.cumsum([0] + [16] * 11)
    assert not tight_sync_filter(series(ts, polls=polls))


def _pair(ip, ts_ok=True):
    a = ClientSeries(ip, C2S, np.arange(3.0), np.zeros(3), np.full(3, 6), tightly_synced=ts_ok)
    b = ClientSeries(ip, S2C, np.arange(3.0), np.zeros(3), np.full(3, 6), tightly_synced=ts_ok)
    return a, b


def test_cluster_examples():
    cl = cluster_prefixes({ip: _pair(ip) for ip in ("10.0.0.1", "10.0.0.200")})
    assert [(c.prefix, c.direction, c.n) for c in cl] == [("10.0.0.0/24", C2S, 2), ("10.0.0.0/24", S2C, 2)]
    assert cluster_prefixes({"10.0.0.1": _pair("10.0.0.1")}) == []
    cl = cluster_prefixes({ip: _pair(ip) for ip in ("2001:db8::1", "2001:db8::2")})
    assert cl[0].prefix == "2001:db8::/96"
    cl = cluster_prefixes({"10.0.0.1": _pair("10.0.0.1"), "10.0.0.2": _pair("10.0.0.2", False)})
    assert cl == []


ipv4_hosts = st.lists(st.tuples(st.integers(0, 3), st.integers(1, 254)), max_size=25, unique=True)


@settings(max_examples=60, deadline=None)
@given(ipv4_hosts, st.randoms(use_true_random=False))
def test_cluster_partition_and_order_invariance(hosts, rnd):
    ips = [f"10.0.{a}.{b}" for a, b in hosts]
    streams = {ip: _pair(ip) for ip in ips}
    clusters = cluster_prefixes(streams)
    for d in (C2S, S2C):
        seen = [c.client_ip for cl in clusters if cl.direction == d for c in cl.clients]
        assert len(seen) == len(set(seen))
        for cl in clusters:
            assert all(client_prefix(c.client_ip) == cl.prefix for c in cl.clients) and cl.n >= 2
        by_prefix = {}
        for ip in ips:
            by_prefix.setdefault(client_prefix(ip), []).append(ip)
        assert set(seen) == {ip for v in by_prefix.values() if len(v) >= 2 for ip in v}
    shuffled = list(streams.items())
    rnd.shuffle(shuffled)
    again = cluster_prefixes(dict(shuffled))
    assert [(c.prefix, c.direction, [x.client_ip for x in c.clients]) for c in again] == \
           [(c.prefix, c.direction, [x.client_ip for x in c.clients]) for c in clusters]


def test_label_clients_drops_both_directions_together():
    rs = [rec("10.0.0.1", 64.0 * i) for i in range(20)] + [rec("10.0.0.2", 64.0 * i) for i in range(3)]
    labelled = label_clients(extract_owd_streams(rs, SERVER))
    assert labelled["10.0.0.1"][0].tightly_synced and labelled["10.0.0.1"][1].tightly_synced
    assert labelled["10.0.0.2"][0].tightly_synced is False and labelled["10.0.0.2"][1].tightly_synced is False


def test_cluster_files_round_trip(tmp_path):
    sc = SynthScenario(prefixes=[("10.0.0.0/24", 3), ("2001:db8::/96", 2)], duration=3600, seed=9)
    frame, _ = generate_frame(sc)
    clusters, stats = filter_and_cluster(frame, [sc.server_ip, sc.server_ip6], "S1")
    assert stats["clusters"] == {C2S: 2, S2C: 2}
    write_clusters(clusters, tmp_path)
    back = read_clusters(tmp_path)
    assert [c.key for c in back] == [c.key for c in clusters]
    for a, b in zip(clusters, back):
        for x, y in zip(a.clients, b.clients):
            assert x.client_ip == y.client_ip
            np.testing.assert_array_equal(x.timestamps, y.timestamps)
            np.testing.assert_array_equal(x.owd, y.owd)
            assert x.min_poll == y.min_poll


def test_frame_and_record_inputs_agree():
    rs = [rec("10.0.0.1", float(t), lat=t / 100) for t in range(5)]
    a = extract_owd_streams(rs, SERVER)
    b = extract_owd_streams(records_to_frame(rs), SERVER)
    np.testing.assert_array_equal(a["10.0.0.1"][1].owd, b["10.0.0.1"][1].owd)
