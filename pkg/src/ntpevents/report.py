"""Daily statistics report and per-cluster OWD plot data."""

from __future__ import annotations

import csv
import ipaddress
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .consolidate import AggregatedEvent, ConsolidatedEvent
from .detect.matrix import ClusterMatrix
from .owd import DIRECTIONS

TOP_N = 10
KINDS = ("event", "single_spike")
KEPT_CLASSES = ("A", "B", "C")


@dataclass
class DayInputs:
    date: str
    server_bytes: Mapping[str, Mapping[str, int | None]] | None = None  # server -> {"raw", "csv"}
    total_clients: int | None = None
    observed_prefixes: Iterable[tuple[str, str]] | None = None  # (direction, prefix)
    detected_count: int | None = None
    consolidated: list[ConsolidatedEvent] | None = None
    aggregated: list[AggregatedEvent] | None = None
    gap_notes: list[str] = field(default_factory=list)


@dataclass
class DailyReport:
    date: str
    server_bytes: dict | None
    total_clients: int | None
    prefixes_observed: dict | None
    prefixes_with_events: dict | None
    event_counts: dict | None
    total_events: int | None
    top_by_size: list | None
    top_by_duration: list | None
    consolidation: dict
    gaps: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"Daily event report for {self.date}", ""]
        if self.total_clients is not None:
            lines.append(f"clients observed: {self.total_clients}")
        if self.server_bytes:
            for sid, b in sorted(self.server_bytes.items()):
                lines.append(f"server {sid}: raw={b.get('raw')} bytes, csv={b.get('csv')} bytes")
        if self.prefixes_observed:
            for d in DIRECTIONS:
                obs = self.prefixes_observed.get(d, {})
                hit = (self.prefixes_with_events or {}).get(d, {})
                lines.append(f"{d}: /24 observed {obs.get('v4', 0)} with events {hit.get('v4', 0)}; "
                             f"/96 observed {obs.get('v6', 0)} with events {hit.get('v6', 0)}")
        if self.event_counts is not None:
            lines.append(f"events (classes A-C): {self.total_events}")
            for d in DIRECTIONS:
                for k in KINDS:
                    c = self.event_counts[d][k]
                    lines.append(f"  {d} {k}: " + " ".join(f"{cls}={c[cls]}" for cls in KEPT_CLASSES))
        for title, rows in (("largest aggregated events", self.top_by_size),
                            ("longest events", self.top_by_duration)):
            if rows:
                lines.append("")
                lines.append(f"top {len(rows)} {title}:")
                for r in rows:
                    lines.append("  " + ", ".join(f"{k}={r[k]}" for k in sorted(r)))
        lines.append("")
        lines.append("consolidation: " + ", ".join(f"{k}={v}" for k, v in sorted(self.consolidation.items())))
        for note in self.gaps:
            lines.append(f"GAP: {note}")
        return "\n".join(lines) + "\n"


def _family(prefix: str) -> str:
    return "v4" if ipaddress.ip_network(prefix, strict=False).version == 4 else "v6"


def _empty_counts() -> dict:
    return {d: {k: {c: 0 for c in KEPT_CLASSES} for k in KINDS} for d in DIRECTIONS}


def daily_report(inputs: DayInputs) -> DailyReport:
    gaps = list(inputs.gap_notes)
    if inputs.observed_prefixes is not None:
        observed = {d: {"v4": 0, "v6": 0} for d in DIRECTIONS}
        for direction, prefix in sorted(set(inputs.observed_prefixes)):
            observed[direction][_family(prefix)] += 1
    else:
        observed = None
        gaps.append("cluster index missing: prefix observation counts unavailable")
    if inputs.total_clients is None:
        gaps.append("client count unavailable")
    if inputs.server_bytes is None:
        gaps.append("per-server byte totals unavailable")

    if inputs.consolidated is not None:
        counts = _empty_counts()
        with_events: dict = {d: {"v4": set(), "v6": set()} for d in DIRECTIONS}
        for ev in inputs.consolidated:
            counts[ev.direction][ev.kind][ev.confidence_class] += 1
            with_events[ev.direction][_family(ev.prefix)].add(ev.prefix)
        prefixes_with_events = {d: {f: len(s) for f, s in v.items()} for d, v in with_events.items()}
        total = len(inputs.consolidated)
        longest = sorted((e for e in inputs.consolidated if e.kind == "event"),
                         key=lambda e: (-e.duration, e.start_epoch, e.prefix, e.direction))[:TOP_N]
        top_duration = [
            {"prefix": e.prefix, "direction": e.direction, "start_epoch": e.start_epoch,
             "end_epoch": e.end_epoch, "duration_secs": e.duration, "class": e.confidence_class}
            for e in longest
        ]
    else:
        counts = prefixes_with_events = total = top_duration = None
        gaps.append("consolidated events missing")

    if inputs.aggregated is not None:
        largest = sorted(inputs.aggregated,
                         key=lambda a: (-len(a.constituent_prefixes), -a.duration, a.announced_prefix,
                                        a.direction, a.start_epoch))[:TOP_N]
        top_size = [
            {"announced_prefix": a.announced_prefix, "asn": a.asn, "direction": a.direction,
             "start_epoch": a.start_epoch, "end_epoch": a.end_epoch,
             "constituent_prefixes": len(a.constituent_prefixes), "class": a.confidence_class}
            for a in largest
        ]
    else:
        top_size = None
        gaps.append("aggregated events missing")

    consolidation = {
        "detected_events": inputs.detected_count,
        "consolidated_events": None if inputs.consolidated is None else len(inputs.consolidated),
        "aggregated_events": None if inputs.aggregated is None else len(inputs.aggregated),
    }
    return DailyReport(
        date=inputs.date,
        server_bytes=None if inputs.server_bytes is None else {k: dict(v) for k, v in inputs.server_bytes.items()},
        total_clients=inputs.total_clients,
        prefixes_observed=observed,
        prefixes_with_events=prefixes_with_events,
        event_counts=counts,
        total_events=total,
        top_by_size=top_size,
        top_by_duration=top_duration,
        consolidation=consolidation,
        gaps=gaps,
    )


# --------------------------------------------------------------------------- plot data

@dataclass(frozen=True)
class PlotRow:
    bin_start: float
    client_ip: str
    owd: float
    filled: bool


def owd_plotdata(matrix: ClusterMatrix) -> list[PlotRow]:
    """Long-format (bin_start, client_ip, owd, filled) rows, bin-major."""
    rows = []
    for i, start in enumerate(matrix.time_bins):
        for j, ip in enumerate(matrix.client_order):
            rows.append(PlotRow(float(start), ip, float(matrix.values[i, j]), bool(matrix.na_mask[i, j])))
    return rows


def find_matrix(matrices: Iterable[ClusterMatrix], prefix: str, direction: str,
                server_id: str | None = None) -> ClusterMatrix:
    matrices = list(matrices)
    for m in matrices:
        if m.prefix == prefix and m.direction == direction and (server_id is None or m.server_id == server_id):
            return m
    available = sorted(f"{m.server_id}/{m.direction}/{m.prefix}" for m in matrices)
    raise KeyError(f"unknown cluster {server_id or '*'}/{direction}/{prefix}; available: {available}")


def write_plotdata(rows: Iterable[PlotRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_start", "client_ip", "owd", "filled"))
        for r in rows:
            start = str(int(r.bin_start)) if r.bin_start.is_integer() else repr(r.bin_start)
            w.writerow((start, r.client_ip, repr(r.owd), "true" if r.filled else "false"))
