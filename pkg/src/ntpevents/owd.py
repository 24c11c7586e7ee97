"""Per-client one-way delay streams, tight-synchronization filtering and prefix clustering."""

from __future__ import annotations

import csv
import ipaddress
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

from .ingest import NtpPacketRecord, records_to_frame

C2S, S2C = "c2s", "s2c"
DIRECTIONS = (C2S, S2C)
POLLING_CLASSES = ("constant", "increasing", "decreasing", "variable")


@dataclass
class ClientSeries:
    client_ip: str
    direction: str
    timestamps: np.ndarray
    owd: np.ndarray
    polls: np.ndarray
    polling_class: str | None = None
    tightly_synced: bool | None = None

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def min_poll(self) -> int:
        return int(self.polls.min())

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.timestamps.tolist(), self.owd.tolist()))


@dataclass
class PrefixCluster:
    prefix: str
    direction: str
    server_id: str
    clients: list[ClientSeries] = field(default_factory=list)

    @property
    def key(self) -> tuple[str, str, str]:
        return self.server_id, self.direction, self.prefix

    @property
    def n(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class TightSyncParams:
    min_samples: int = 10
    constant_min_intervals: float = 4.0
    increasing_hold_intervals: float = 2.0
    max_spacing_mad_ratio: float = 0.25


# --------------------------------------------------------------------------- extraction

def extract_owd_streams(
    records: Iterable[NtpPacketRecord] | pd.DataFrame, server_ip: str | Iterable[str]
) -> dict[str, tuple[ClientSeries, ClientSeries]]:
    """Split client->server packets into per-client (c2s, s2c) delay series.

    ``server_ip`` may list several addresses (e.g. the server's IPv4 and IPv6).

    c2s OWD comes from the root delay field, s2c OWD from the latency field.
    Samples keep their input order; see :func:`sort_temporal`.
    """
    frame = records if isinstance(records, pd.DataFrame) else records_to_frame(records)
    if frame.empty:
        return {}
    addrs = [server_ip] if isinstance(server_ip, str) else list(server_ip)
    servers = [str(ipaddress.ip_address(a)) for a in addrs]
    mask = frame["dst_ip"].isin(servers).to_numpy()
    if "mode" in frame:
        mode = frame["mode"]
        mask &= (mode.isna() | (mode == 3)).to_numpy(dtype=bool)
    sub = frame.loc[mask]
    if sub.empty:
        return {}
    codes, clients = pd.factorize(sub["src_ip"])
    order = np.argsort(codes, kind="stable")
    bounds = np.flatnonzero(np.diff(codes[order])) + 1
    ts = sub["packet_timestamp"].to_numpy(dtype=float)[order]
    c2s = sub["root_delay"].to_numpy(dtype=float)[order]
    s2c = sub["latency"].to_numpy(dtype=float)[order]
    polls = sub["poll_exponent"].to_numpy(dtype=np.int64)[order]
    out = {}
    for ip, t, a, b, p in zip(
        clients[codes[order][np.r_[0, bounds]]],
        np.split(ts, bounds), np.split(c2s, bounds), np.split(s2c, bounds), np.split(polls, bounds),
    ):
        out[ip] = (ClientSeries(ip, C2S, t, a, p), ClientSeries(ip, S2C, t, b, p))
    return out


def sort_temporal(series: ClientSeries) -> ClientSeries:
    order = np.argsort(series.timestamps, kind="stable")
    return replace(series, timestamps=series.timestamps[order], owd=series.owd[order], polls=series.polls[order])


# --------------------------------------------------------------------------- polling / TS

def classify_polling(poll_values) -> str:
    polls = np.asarray(poll_values)
    if polls.size == 0:
        raise ValueError("classify_polling needs at least one poll value")
    d = np.diff(polls)
    if not d.any():
        return "constant"
    if (d >= 0).all():
        return "increasing"
    if (d <= 0).all():
        return "decreasing"
    return "variable"


def tight_sync_filter(series: ClientSeries, params: TightSyncParams = TightSyncParams()) -> bool:
    """Decide whether a client is tightly synchronized.

    Needs at least ``min_samples`` samples, then per polling class:
    constant -> observed over >= 4 polling intervals; increasing -> final
    poll held for >= 2 intervals; otherwise the median absolute deviation of
    the sample spacing must stay within 25% of the median spacing.
    """
    ts, polls = series.timestamps, series.polls
    if len(ts) < params.min_samples:
        return False
    cls = series.polling_class or classify_polling(polls)
    if cls == "constant":
        return ts[-1] - ts[0] >= params.constant_min_intervals * 2.0 ** polls[0]
    if cls == "increasing":
        final = polls[-1]
        first = int(np.argmax(polls == final))
        return ts[-1] - ts[first] >= params.increasing_hold_intervals * 2.0 ** final
    spacing = np.diff(ts)
    med = np.median(spacing)
    if med <= 0:
        return False
    mad = np.median(np.abs(spacing - med))
    return bool(mad <= params.max_spacing_mad_ratio * med)


def label_clients(
    streams: Mapping[str, tuple[ClientSeries, ClientSeries]], params: TightSyncParams = TightSyncParams()
) -> dict[str, tuple[ClientSeries, ClientSeries]]:
    """Sort, classify and TS-label every client; both directions share one verdict."""
    out = {}
    for ip, (c2s, s2c) in streams.items():
        c2s, s2c = sort_temporal(c2s), sort_temporal(s2c)
        cls = classify_polling(c2s.polls)
        c2s.polling_class = s2c.polling_class = cls
        ts_ok = tight_sync_filter(c2s, params)
        c2s.tightly_synced = s2c.tightly_synced = ts_ok
        out[ip] = (c2s, s2c)
    return out


# --------------------------------------------------------------------------- clustering

def client_prefix(ip: str, v4_len: int = 24, v6_len: int = 96) -> str:
    addr = ipaddress.ip_address(ip)
    width = v4_len if addr.version == 4 else v6_len
    return str(ipaddress.ip_network(f"{addr}/{width}", strict=False))


def _ip_key(ip: str):
    addr = ipaddress.ip_address(ip)
    return addr.version, int(addr)


def cluster_prefixes(
    client_series: Mapping[str, tuple[ClientSeries, ClientSeries]],
    server_id: str = "",
    v4_len: int = 24,
    v6_len: int = 96,
    min_clients: int = 2,
) -> list[PrefixCluster]:
    """Group clients into /24 (IPv4) and /96 (IPv6) clusters, one set per direction.

    Only clients labelled tightly synchronized (or unlabelled) take part.
    Clusters with fewer than ``min_clients`` clients are dropped. Output is
    ordered by (direction, address family, network) and clients by address.
    """
    groups: dict[str, list[str]] = {}
    for ip, (c2s, _) in client_series.items():
        if c2s.tightly_synced is False:
            continue
        groups.setdefault(client_prefix(ip, v4_len, v6_len), []).append(ip)
    clusters = []
    for direction, idx in ((C2S, 0), (S2C, 1)):
        for prefix in sorted(groups, key=lambda p: _ip_key(p.split("/")[0])):
            members = sorted(groups[prefix], key=_ip_key)
            if len(members) < min_clients:
                continue
            clusters.append(PrefixCluster(prefix, direction, server_id,
                                          [client_series[ip][idx] for ip in members]))
    return clusters


def filter_and_cluster(
    frame: pd.DataFrame,
    server_ip: str | Iterable[str],
    server_id: str,
    params: TightSyncParams = TightSyncParams(),
    v4_len: int = 24,
    v6_len: int = 96,
) -> tuple[list[PrefixCluster], dict]:
    streams = label_clients(extract_owd_streams(frame, server_ip), params)
    classes = {c: 0 for c in POLLING_CLASSES}
    for c2s, _ in streams.values():
        classes[c2s.polling_class] += 1
    clusters = cluster_prefixes(streams, server_id, v4_len, v6_len)
    stats = {
        "clients": len(streams),
        "tightly_synced": sum(1 for c2s, _ in streams.values() if c2s.tightly_synced),
        "polling_classes": classes,
        "clusters": {d: sum(1 for c in clusters if c.direction == d) for d in DIRECTIONS},
    }
    return clusters, stats


# --------------------------------------------------------------------------- files

INDEX_COLUMNS = ("server_id", "direction", "prefix", "client_ip", "min_poll", "samples", "file")


def cluster_file_name(cluster: PrefixCluster) -> str:
    return f"{cluster.server_id}/{cluster.direction}/{cluster.prefix.replace('/', '_').replace(':', '-')}.csv"


def write_clusters(clusters: Iterable[PrefixCluster], out_dir: str | os.PathLike) -> Path:
    """One ``client_ip,timestamp,owd`` file per cluster plus ``clusters.csv`` index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index_rows = []
    for cluster in clusters:
        name = cluster_file_name(cluster)
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        ips = np.concatenate([np.full(len(c), c.client_ip, dtype=object) for c in cluster.clients])
        table = pa.table({
            "client_ip": pa.array(ips, pa.string()),
            "timestamp": np.concatenate([c.timestamps for c in cluster.clients]),
            "owd": np.concatenate([c.owd for c in cluster.clients]),
        })
        pacsv.write_csv(table, path, write_options=pacsv.WriteOptions(quoting_style="none"))
        for c in cluster.clients:
            index_rows.append([cluster.server_id, cluster.direction, cluster.prefix,
                               c.client_ip, c.min_poll, len(c), name])
    index = out / "clusters.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        w.writerows(index_rows)
    return index


def read_clusters(out_dir: str | os.PathLike) -> list[PrefixCluster]:
    """Inverse of :func:`write_clusters`. Poll values collapse to each client's minimum."""
    out = Path(out_dir)
    index = pd.read_csv(out / "clusters.csv", dtype={"min_poll": np.int64, "samples": np.int64},
                        keep_default_na=False)
    clusters = []
    for (sid, direction, prefix, name), rows in index.groupby(
        ["server_id", "direction", "prefix", "file"], sort=False
    ):
        data = pacsv.read_csv(out / name).to_pandas()
        by_ip = {ip: g for ip, g in data.groupby("client_ip", sort=False)}
        members = []
        for row in rows.itertuples(index=False):
            g = by_ip[row.client_ip]
            ts = g["timestamp"].to_numpy(dtype=float)
            members.append(ClientSeries(
                row.client_ip, direction, ts, g["owd"].to_numpy(dtype=float),
                np.full(len(ts), row.min_poll, dtype=np.int64), tightly_synced=True,
            ))
        clusters.append(PrefixCluster(prefix, direction, str(sid), members))
    return clusters
