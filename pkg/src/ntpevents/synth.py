"""Synthetic NTP client traffic with injected delay/loss events and ground truth."""

from __future__ import annotations

import ipaddress
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .ingest import (
    CSV_COLUMNS,
    NtpPacketRecord,
    PcapWriter,
    build_ntp_payload,
    frame_to_records,
    month_dir,
    to_ntp_timestamp,
    trace_file_name,
    udp_frame,
    write_csv_frame,
)


class ScenarioError(ValueError):
    pass


@dataclass
class InjectedEvent:
    prefix: str
    start: float  # seconds from scenario start
    end: float
    owd_multiplier: float = 4.0
    affected_client_fraction: float = 1.0
    mode: str = "delay"  # delay | loss
    direction: str = "both"  # both | c2s | s2c


@dataclass
class SynthScenario:
    prefixes: list[tuple[str, int]]
    duration: float = 86400.0
    seed: int = 0
    start_epoch: int = 1546300800
    server_ip: str = "192.0.2.1"
    server_ip6: str = "2001:db8:ffff::1"  # destination for IPv6 clients
    server_id: str = "S1"
    baseline_owd: tuple[float, float] = (0.010, 0.060)
    noise_sigma: float = 0.0005
    noise_model: str = "gaussian"  # gaussian | laplace
    poll_exponents: list[int] = field(default_factory=lambda: [6])
    injected_events: list[InjectedEvent] = field(default_factory=list)
    announced_prefixes: list[tuple[str, int]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthScenario":
        raw = dict(raw)
        raw["prefixes"] = [tuple(p) for p in raw.get("prefixes", [])]
        raw["injected_events"] = [InjectedEvent(**e) for e in raw.get("injected_events", [])]
        raw["announced_prefixes"] = [tuple(p) for p in raw.get("announced_prefixes", [])]
        if "baseline_owd" in raw:
            raw["baseline_owd"] = tuple(raw["baseline_owd"])
        if isinstance(raw.get("poll_exponents"), int):
            raw["poll_exponents"] = [raw["poll_exponents"]]
        return cls(**raw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SynthScenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        problems = []
        nets = {}
        for prefix, count in self.prefixes:
            try:
                net = ipaddress.ip_network(prefix, strict=False)
            except ValueError:
                problems.append(f"bad prefix {prefix!r}")
                continue
            nets[prefix] = net
            if count < 2:
                problems.append(f"{prefix}: client_count must be >= 2")
            elif count > net.num_addresses - 2:
                problems.append(f"{prefix}: client_count exceeds prefix size")
        for label, addr, version in (("server_ip", self.server_ip, 4), ("server_ip6", self.server_ip6, 6)):
            try:
                if ipaddress.ip_address(addr).version != version:
                    problems.append(f"{label} must be an IPv{version} address")
            except ValueError:
                problems.append(f"{label} {addr!r} is not an IP address")
        if self.duration <= 0:
            problems.append("duration must be positive")
        lo, hi = self.baseline_owd
        if not 0 < lo <= hi:
            problems.append("baseline_owd must satisfy 0 < low <= high")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if self.noise_model not in ("gaussian", "laplace"):
            problems.append(f"unknown noise_model {self.noise_model!r}")
        if not self.poll_exponents or any(not 0 <= p <= 17 for p in self.poll_exponents):
            problems.append("poll_exponents must be non-empty and within [0, 17]")
        for ev in self.injected_events:
            if ev.prefix not in nets:
                problems.append(f"event prefix {ev.prefix} not in scenario")
            if ev.owd_multiplier <= 1 and ev.mode == "delay":
                problems.append(f"event on {ev.prefix}: owd_multiplier must be > 1")
            if not 0 <= ev.start < ev.end <= self.duration:
                problems.append(f"event on {ev.prefix}: window outside [0, duration]")
            if not 0 < ev.affected_client_fraction <= 1:
                problems.append(f"event on {ev.prefix}: affected_client_fraction outside (0, 1]")
            if ev.mode not in ("delay", "loss"):
                problems.append(f"event on {ev.prefix}: unknown mode {ev.mode!r}")
            if ev.direction not in ("both", "c2s", "s2c"):
                problems.append(f"event on {ev.prefix}: unknown direction {ev.direction!r}")
        if problems:
            raise ScenarioError("; ".join(problems))


@dataclass
class GroundTruthEvent:
    prefix: str
    start_epoch: float
    end_epoch: float
    owd_multiplier: float
    mode: str
    direction: str
    clients: list[str]


def _client_ips(net, count: int, rng: np.random.Generator) -> list[str]:
    hosts = rng.choice(np.arange(1, min(net.num_addresses - 1, 2**16)), size=count, replace=False)
    base = int(net.network_address)
    return [str(ipaddress.ip_address(base + int(h))) for h in np.sort(hosts)]


def generate_frame(scenario: SynthScenario) -> tuple[pd.DataFrame, list[GroundTruthEvent]]:
    """Columnar generator; see :func:`generate`."""
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    t0 = float(scenario.start_epoch)
    lo, hi = scenario.baseline_owd
    events_by_prefix: dict[str, list[InjectedEvent]] = {}
    for ev in scenario.injected_events:
        events_by_prefix.setdefault(ev.prefix, []).append(ev)

    cols: dict[str, list[np.ndarray]] = {k: [] for k in ("src", "ts", "c2s", "s2c", "poll")}
    truth: list[GroundTruthEvent] = []
    for prefix, count in scenario.prefixes:
        net = ipaddress.ip_network(prefix, strict=False)
        clients = _client_ips(net, count, rng)
        polls = rng.choice(scenario.poll_exponents, size=count)
        base = rng.uniform(lo, hi, size=(count, 2))
        affected = []
        for ev in events_by_prefix.get(prefix, []):
            k = max(1, math.ceil(ev.affected_client_fraction * count))
            idx = np.sort(rng.choice(count, size=k, replace=False))
            affected.append((ev, set(idx.tolist())))
            truth.append(GroundTruthEvent(
                prefix=str(net), start_epoch=t0 + ev.start, end_epoch=t0 + ev.end,
                owd_multiplier=ev.owd_multiplier, mode=ev.mode, direction=ev.direction,
                clients=[clients[i] for i in idx],
            ))
        for i, ip in enumerate(clients):
            interval = 2.0 ** int(polls[i])
            phase = round(rng.uniform(0, interval), 6)
            ts = np.round(t0 + phase + interval * np.arange(math.ceil((scenario.duration - phase) / interval)), 6)
            ts = ts[ts < t0 + scenario.duration]
            m = len(ts)
            if scenario.noise_model == "gaussian":
                noise = rng.normal(0.0, scenario.noise_sigma, size=(m, 2))
            else:
                noise = rng.laplace(0.0, scenario.noise_sigma / math.sqrt(2), size=(m, 2))
            owd = np.clip(base[i] + noise, 0.0, None)
            keep = np.ones(m, dtype=bool)
            for ev, idx in affected:
                if i not in idx:
                    continue
                inside = (ts >= t0 + ev.start) & (ts < t0 + ev.end)
                if ev.mode == "loss":
                    keep &= ~inside
                    continue
                if ev.direction in ("both", "c2s"):
                    owd[inside, 0] *= ev.owd_multiplier
                if ev.direction in ("both", "s2c"):
                    owd[inside, 1] *= ev.owd_multiplier
            cols["src"].append(np.full(keep.sum(), ip, dtype=object))
            cols["ts"].append(ts[keep])
            cols["c2s"].append(owd[keep, 0])
            cols["s2c"].append(owd[keep, 1])
            cols["poll"].append(np.full(keep.sum(), polls[i], dtype=np.int64))

    def cat(key, dtype):
        return np.concatenate(cols[key]) if cols[key] else np.array([], dtype=dtype)

    ts = cat("ts", float)
    order = np.argsort(ts, kind="stable")
    c2s, s2c = cat("c2s", float)[order], cat("s2c", float)[order]
    src = cat("src", object)[order]
    v6 = np.fromiter((":" in ip for ip in src), dtype=bool, count=len(src))
    frame = pd.DataFrame({
        "packet_number": np.arange(1, len(ts) + 1, dtype=np.int64),
        "src_ip": src,
        "dst_ip": np.where(v6, scenario.server_ip6, scenario.server_ip).astype(object),
        "latency": s2c,
        "poll_exponent": cat("poll", np.int64)[order],
        "packet_timestamp": ts[order],
        "root_delay": c2s,
        "rtt": c2s + s2c,
        "reference_ip": "GPS",
    })
    frame["mode"] = 3
    truth.sort(key=lambda g: (g.prefix, g.start_epoch))
    return frame, truth


def generate(scenario: SynthScenario) -> tuple[list[NtpPacketRecord], list[GroundTruthEvent]]:
    """Generate client->server NTP records and the list of injected windows.

    Each client polls every 2**poll seconds from a random phase; OWD is the
    client's baseline plus noise (clipped at 0), multiplied inside injected
    delay windows for the affected clients. Loss windows drop samples.
    """
    frame, truth = generate_frame(scenario)
    return frame_to_records(frame), truth


def write_truth(truth: list[GroundTruthEvent], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(t) for t in truth], fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_truth(path: str | os.PathLike) -> list[GroundTruthEvent]:
    with open(path) as fh:
        return [GroundTruthEvent(**t) for t in json.load(fh)]


def write_csv_dataset(scenario: SynthScenario, csv_path, truth_path) -> int:
    frame, truth = generate_frame(scenario)
    write_csv_frame(frame, csv_path)
    write_truth(truth, truth_path)
    return len(frame)


def write_pcap_traces(
    frame: pd.DataFrame, scenario: SynthScenario, out_dir: str | os.PathLike, epoch_length: int = 3600
) -> list[Path]:
    """Encode generated records as hourly pcap files ``<out_dir>/<YYYY-MM>/<server>-<epoch>.pcap``.

    Timestamps are laid out so that decoding reproduces latency (origin -
    receive) and rtt exactly; root delay is quantized to 1/65536 s.
    """
    out = Path(out_dir)
    paths = []
    ts = frame["packet_timestamp"].to_numpy()
    epochs = (np.floor((ts - scenario.start_epoch) / epoch_length) * epoch_length + scenario.start_epoch).astype(np.int64)
    n_epochs = math.ceil(scenario.duration / epoch_length)
    for k in range(n_epochs):
        epoch = scenario.start_epoch + k * epoch_length
        sel = np.flatnonzero(epochs == epoch)
        path = out / month_dir(epoch) / trace_file_name(scenario.server_id, epoch)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            writer = PcapWriter(fh)
            for row in frame.iloc[sel].itertuples(index=False):
                cap = float(row.packet_timestamp)
                s2c, c2s = float(row.latency), float(row.root_delay)
                t = cap - 2 * s2c - c2s
                recv = to_ntp_timestamp(t)
                payload = build_ntp_payload(
                    stratum=1,
                    poll=int(row.poll_exponent),
                    root_delay_raw=min(round(c2s * 65536), 2**32 - 1),
                    reference=b"GPS\x00",
                    origin=recv + round(s2c * 2**32),
                    receive=recv,
                    transmit=recv,
                )
                writer.write(udp_frame(row.src_ip, row.dst_ip, 40000, 123, payload), cap)
        paths.append(path)
    return paths
