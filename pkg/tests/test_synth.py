import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntpevents.ingest import parse_pcap, read_csv_frame
from ntpevents.synth import (
    InjectedEvent,
    ScenarioError,
    SynthScenario,
    generate,
    generate_frame,
    read_truth,
    write_csv_dataset,
    write_pcap_traces,
    write_truth,
)


def scenario(**kw):
    base = dict(prefixes=[("10.0.0.0/24", 4), ("10.0.1.0/24", 3)], duration=6 * 3600, seed=5)
    base.update(kw)
    return SynthScenario(**base)


def test_no_events_no_truth():
    frame, truth = generate_frame(scenario())
    assert truth == [] and len(frame) > 0


def test_same_seed_byte_identical(tmp_path):
    sc = scenario(injected_events=[InjectedEvent("10.0.0.0/24", 3600, 4000)])
    write_csv_dataset(sc, tmp_path / "a.csv", tmp_path / "a.json")
    write_csv_dataset(sc, tmp_path / "b.csv", tmp_path / "b.json")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = scenario(seed=6, injected_events=sc.injected_events)
    write_csv_dataset(other, tmp_path / "c.csv", tmp_path / "c.json")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_fourfold_window():
    sc = scenario(injected_events=[InjectedEvent("10.0.0.0/24", 7200, 9000, 4.0)], noise_sigma=0.0002)
    frame, (gt,) = generate_frame(sc)
    assert gt.prefix == "10.0.0.0/24" and len(gt.clients) == 4
    for ip in gt.clients:
        rows = frame[frame.src_ip == ip]
        inside = (rows.packet_timestamp >= gt.start_epoch) & (rows.packet_timestamp < gt.end_epoch)
        for col in ("latency", "root_delay"):
            base = rows.loc[~inside, col].mean()
            assert rows.loc[inside, col].mean() >= 4.0 * 0.9 * base
            assert rows.loc[inside, col].mean() == pytest.approx(4.0 * base, rel=0.05)


def test_affected_fraction_and_direction():
    sc = scenario(prefixes=[("10.0.0.0/24", 10)],
                  injected_events=[InjectedEvent("10.0.0.0/24", 3600, 7200, 3.0, 0.3, direction="s2c")])
    frame, (gt,) = generate_frame(sc)
    assert len(gt.clients) == 3
    affected = frame[frame.src_ip.isin(gt.clients)]
    inside = (affected.packet_timestamp >= gt.start_epoch) & (affected.packet_timestamp < gt.end_epoch)
    assert affected.loc[inside, "latency"].mean() > 2 * affected.loc[~inside, "latency"].mean()
    assert affected.loc[inside, "root_delay"].mean() == pytest.approx(
        affected.loc[~inside, "root_delay"].mean(), rel=0.3)


def test_loss_mode_removes_samples():
    sc = scenario(injected_events=[InjectedEvent("10.0.1.0/24", 3600, 7200, mode="loss")])
    frame, (gt,) = generate_frame(sc)
    ts = frame.loc[frame.src_ip.isin(gt.clients), "packet_timestamp"]
    assert not ((ts >= gt.start_epoch) & (ts < gt.end_epoch)).any()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), polls=st.lists(st.integers(4, 10), min_size=1, max_size=3))
def test_sample_spacing_is_poll_interval(seed, polls):
    frame, _ = generate_frame(scenario(seed=seed, poll_exponents=polls, duration=4 * 3600))
    for ip, rows in frame.groupby("src_ip"):
        ts = rows.packet_timestamp.to_numpy()
        poll = rows.poll_exponent.iloc[0]
        assert (rows.poll_exponent == poll).all()
        assert np.all(np.diff(ts) > 0)
        assert np.allclose(np.diff(ts), 2.0**poll, atol=2e-6)


@pytest.mark.parametrize("bad", [
    dict(prefixes=[("10.0.0.0/24", 1)]),
    dict(prefixes=[("nope", 3)]),
    dict(injected_events=[InjectedEvent("10.0.0.0/24", 10, 20, owd_multiplier=0.5)]),
    dict(injected_events=[InjectedEvent("10.0.0.0/24", 10, 10**9)]),
    dict(injected_events=[InjectedEvent("10.9.9.0/24", 10, 20)]),
    dict(noise_model="cauchy"),
    dict(server_ip="2001:db8::1"),
])
def test_invalid_scenarios_rejected(bad):
    with pytest.raises(ScenarioError):
        generate(scenario(**bad))


def test_truth_round_trip_and_json_scenario(tmp_path):
    sc = scenario(injected_events=[InjectedEvent("10.0.0.0/24", 100, 900)])
    _, truth = generate_frame(sc)
    write_truth(truth, tmp_path / "t.json")
    assert read_truth(tmp_path / "t.json") == truth
    again = SynthScenario.from_dict(sc.to_dict())
    assert generate_frame(again)[0].equals(generate_frame(sc)[0])


def test_ipv6_clients_talk_to_v6_server():
    frame, _ = generate_frame(scenario(prefixes=[("2001:db8::/96", 3), ("10.0.0.0/24", 2)]))
    v6 = frame.src_ip.str.contains(":")
    assert (frame.loc[v6, "dst_ip"] == "2001:db8:ffff::1").all()
    assert (frame.loc[~v6, "dst_ip"] == "192.0.2.1").all()


def test_pcap_traces_decode_to_frame(tmp_path):
    sc = scenario(duration=2 * 3600, prefixes=[("10.0.0.0/24", 2), ("2001:db8::/96", 2)])
    frame, _ = generate_frame(sc)
    paths = write_pcap_traces(frame, sc, tmp_path)
    assert [p.name for p in paths] == [f"S1-{sc.start_epoch}.pcap", f"S1-{sc.start_epoch + 3600}.pcap"]
    recs = [r for p in paths for r in parse_pcap(p)[0]]
    assert len(recs) == len(frame)
    for r, row in zip(recs, frame.itertuples()):
        assert (r.src_ip, r.dst_ip, r.poll_exponent) == (row.src_ip, row.dst_ip, row.poll_exponent)
        assert abs(r.packet_timestamp - row.packet_timestamp) < 1e-6
        assert abs(r.latency - row.latency) < 1e-6
        assert abs(r.root_delay - row.root_delay) <= 0.5 / 65536
        assert r.reference_ip == "GPS"


def test_csv_dataset_reads_back(tmp_path):
    sc = scenario()
    n = write_csv_dataset(sc, tmp_path / "d.csv", tmp_path / "t.json")
    frame, bad = read_csv_frame(tmp_path / "d.csv")
    assert bad == 0 and len(frame) == n
