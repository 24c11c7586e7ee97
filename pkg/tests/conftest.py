import io
import struct

import numpy as np
import pytest

from ntpevents.ingest import PcapWriter, build_ntp_payload, to_ntp_timestamp, udp_frame
from ntpevents.owd import C2S, ClientSeries, PrefixCluster

T0 = 1546300800  # 2019-01-01T00:00:00Z


def ntp_packet(src="10.0.0.5", dst="192.0.2.1", *, t=T0 + 10.0, latency=0.02, root_delay_raw=1311,
               poll=6, mode=3, stratum=1, reference=b"GPS\x00", sport=40000, dport=123):
    """Ethernet frame carrying a mode-3 NTP header whose origin-receive difference is ``latency``."""
    recv = to_ntp_timestamp(t - 0.1)
    origin = recv + round(latency * 2**32)
    payload = build_ntp_payload(mode=mode, stratum=stratum, poll=poll, root_delay_raw=root_delay_raw,
                                reference=reference, origin=origin, receive=recv, transmit=recv)
    return udp_frame(src, dst, sport, dport, payload)


def pcap_bytes(frames, start=T0 + 10.0, step=1.0):
    buf = io.BytesIO()
    w = PcapWriter(buf)
    for i, f in enumerate(frames):
        w.write(f, start + i * step)
    return buf.getvalue()


def make_cluster(prefix, samples, polls=None, direction=C2S, server_id="S1"):
    """``samples``: {ip: [(ts, owd), ...]}; constant poll per client (default 6)."""
    clients = []
    for ip, pts in samples.items():
        ts = np.array([p[0] for p in pts], dtype=float)
        owd = np.array([p[1] for p in pts], dtype=float)
        poll = (polls or {}).get(ip, 6)
        clients.append(ClientSeries(ip, direction, ts, owd, np.full(len(ts), poll, dtype=np.int64),
                                    tightly_synced=True))
    return PrefixCluster(prefix, direction, server_id, clients)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def le_pcap_header(linktype, magic=0xA1B2C3D4, endian="<"):
    return struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
