"""Matching detected events against third-party (Trinocular-style) /24 event lists."""

from __future__ import annotations

import csv
import ipaddress
import json
import os
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Iterable, Protocol

DEFAULT_WINDOW = 3600.0


class ExternalFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ExternalEvent:
    prefix: str
    start_epoch: float
    end_epoch: float
    source: str = "external"


class EventLike(Protocol):
    prefix: str
    start_epoch: float
    end_epoch: float
    confidence_class: str
    kind: str


@dataclass(frozen=True)
class MatchResult:
    bigben_index: int
    external_index: int
    match_type: str  # direct | pre | post
    bigben_class: str
    prefix: str
    gap: float  # seconds between the intervals, 0 for direct


def _parse_csv(lines: Iterable[str], source: str) -> list[ExternalEvent]:
    out = []
    for n, row in enumerate(csv.reader(lines), 1):
        if not row or (n == 1 and row[0].strip().lower() == "prefix"):
            continue
        if len(row) < 3:
            raise ExternalFormatError(n, f"expected prefix,start_epoch,end_epoch; got {row!r}")
        try:
            net = ipaddress.ip_network(row[0].strip(), strict=False)
            start, end = float(row[1]), float(row[2])
        except ValueError as exc:
            raise ExternalFormatError(n, str(exc)) from exc
        if end < start:
            raise ExternalFormatError(n, "end_epoch before start_epoch")
        out.append(ExternalEvent(str(net), start, end, row[3].strip() if len(row) > 3 and row[3].strip() else source))
    return out


# Converters from other encodings register here: name -> (lines, source label) -> events.
CONVERTERS: dict[str, Callable[[Iterable[str], str], list[ExternalEvent]]] = {"csv": _parse_csv}


def load_external(path: str | os.PathLike, fmt: str = "csv", source: str = "external") -> list[ExternalEvent]:
    if fmt not in CONVERTERS:
        raise ValueError(f"no converter for {fmt!r}; known: {sorted(CONVERTERS)}")
    with open(path, newline="") as fh:
        return CONVERTERS[fmt](fh, source)


def write_external(events: Iterable[ExternalEvent], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("prefix", "start_epoch", "end_epoch", "source"))
        for e in events:
            w.writerow((e.prefix, repr(float(e.start_epoch)), repr(float(e.end_epoch)), e.source))


def classify_pair(b_start, b_end, x_start, x_end, window: float = DEFAULT_WINDOW) -> tuple[str, float] | None:
    """Match type of a (detected, external) interval pair, or None.

    direct: the closed intervals intersect. pre: the detected event ends at
    most ``window`` seconds before the external start. post: it starts at
    most ``window`` seconds after the external end. Gaps are edge to edge and
    the window bound is inclusive.
    """
    if b_start <= x_end and x_start <= b_end:
        return "direct", 0.0
    if b_end < x_start:
        gap = x_start - b_end
        return ("pre", gap) if gap <= window else None
    gap = b_start - x_end
    return ("post", gap) if gap <= window else None


def _is_v4(prefix: str) -> bool:
    return ipaddress.ip_network(prefix, strict=False).version == 4


def _day(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%d")


def match_events(
    bigben: list[EventLike], external: list[ExternalEvent], window: float = DEFAULT_WINDOW
) -> tuple[list[MatchResult], dict]:
    """Classify every same-/24 (detected, external) pair and summarize.

    IPv6 prefixes on either side are excluded. The summary counts each
    detected event at most once per match type, per day of its start and
    per confidence class; matching external events are likewise counted
    once per type.
    """
    b_by: dict[str, list[int]] = defaultdict(list)
    x_by: dict[str, list[int]] = defaultdict(list)
    for i, ev in enumerate(bigben):
        if _is_v4(ev.prefix):
            b_by[str(ipaddress.ip_network(ev.prefix, strict=False))].append(i)
    for j, ev in enumerate(external):
        if _is_v4(ev.prefix):
            x_by[str(ipaddress.ip_network(ev.prefix, strict=False))].append(j)
    shared = sorted(set(b_by) & set(x_by))

    results: list[MatchResult] = []
    for prefix in shared:
        for i in b_by[prefix]:
            b = bigben[i]
            for j in x_by[prefix]:
                x = external[j]
                hit = classify_pair(b.start_epoch, b.end_epoch, x.start_epoch, x.end_epoch, window)
                if hit:
                    results.append(MatchResult(i, j, hit[0], b.confidence_class, prefix, hit[1]))

    per_type_b: dict[str, set[int]] = defaultdict(set)
    per_type_x: dict[str, set[int]] = defaultdict(set)
    for r in results:
        per_type_b[r.match_type].add(r.bigben_index)
        per_type_x[r.match_type].add(r.external_index)
    per_day: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    per_class: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for mtype, idx in per_type_b.items():
        for i in idx:
            b = bigben[i]
            per_day[_day(b.start_epoch)][f"{b.kind}_{mtype}"] += 1
            per_class[b.confidence_class][mtype] += 1
    for mtype, idx in per_type_x.items():
        for j in idx:
            per_day[_day(external[j].start_epoch)][f"external_{mtype}"] += 1

    summary = {
        "window_secs": window,
        "pairs": {t: sum(1 for r in results if r.match_type == t) for t in ("direct", "pre", "post")},
        "bigben_events_matched": {t: len(per_type_b.get(t, ())) for t in ("direct", "pre", "post")},
        "external_events_matched": {t: len(per_type_x.get(t, ())) for t in ("direct", "pre", "post")},
        "per_day": {d: dict(sorted(v.items())) for d, v in sorted(per_day.items())},
        "per_class": {c: dict(sorted(v.items())) for c, v in sorted(per_class.items())},
        "prefixes": {
            "bigben": len(b_by),
            "external": len(x_by),
            "shared": len(shared),
            "bigben_only": len(set(b_by) - set(x_by)),
            "external_only": len(set(x_by) - set(b_by)),
        },
        "excluded_ipv6": {
            "bigben": sum(1 for ev in bigben if not _is_v4(ev.prefix)),
            "external": sum(1 for ev in external if not _is_v4(ev.prefix)),
        },
    }
    return results, summary


def write_match_report(results: list[MatchResult], summary: dict, bigben: list[EventLike],
                       external: list[ExternalEvent], path: str | os.PathLike) -> None:
    """JSON report: summary plus every matched pair."""
    pairs = [
        {
            "prefix": r.prefix,
            "match_type": r.match_type,
            "gap_secs": r.gap,
            "bigben_class": r.bigben_class,
            "bigben_kind": bigben[r.bigben_index].kind,
            "bigben_start": bigben[r.bigben_index].start_epoch,
            "bigben_end": bigben[r.bigben_index].end_epoch,
            "external_start": external[r.external_index].start_epoch,
            "external_end": external[r.external_index].end_epoch,
            "external_source": external[r.external_index].source,
        }
        for r in results
    ]
    with open(path, "w") as fh:
        json.dump({"summary": summary, "matches": pairs}, fh, indent=1, sort_keys=True)
        fh.write("\n")
