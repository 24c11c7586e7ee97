"""Cross-server event consolidation, BGP-prefix aggregation and AS ranking."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from intervaltree import IntervalTree

from .detect.events import CLASSES, DetectedEvent, best_class
from .prefixes import PrefixTable, PrefixTableError

MIN_OVERLAP = 1.0  # seconds


@dataclass
class ConsolidatedEvent:
    prefix: str
    direction: str
    kind: str
    start_epoch: float
    end_epoch: float
    confidence_class: str
    contributing_servers: set[str] = field(default_factory=set)
    constituent_event_count: int = 1
    client_count: int = 0

    @property
    def duration(self) -> float:
        return self.end_epoch - self.start_epoch


@dataclass
class AggregatedEvent:
    announced_prefix: str
    asn: int
    direction: str
    start_epoch: float
    end_epoch: float
    confidence_class: str
    constituent_prefixes: set[str] = field(default_factory=set)
    constituent_event_count: int = 0

    @property
    def duration(self) -> float:
        return self.end_epoch - self.start_epoch


def overlaps(a_start, a_end, b_start, b_end, min_overlap: float = MIN_OVERLAP) -> bool:
    """Closed-interval intersection of at least ``min_overlap`` seconds."""
    return min(a_end, b_end) - max(a_start, b_start) >= min_overlap


class _DisjointSet:
    def __init__(self):
        self.parent: list[int] = []

    def add(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def merge_overlapping(items: list, min_overlap: float = MIN_OVERLAP) -> list[list]:
    """Group items (with start_epoch/end_epoch) into chains of temporal overlap.

    Items are inserted in the given order; each new interval is joined with
    every indexed interval it overlaps, so chained overlaps collapse into one
    group. Groups come back in order of their first item.
    """
    tree = IntervalTree()
    ds = _DisjointSet()
    for item in items:
        i = ds.add()
        s, e = item.start_epoch, item.end_epoch
        if e > s:
            for iv in tree.overlap(s, e):
                if overlaps(s, e, iv.begin, iv.end, min_overlap):
                    ds.union(i, iv.data)
            tree.addi(s, e, i)
    groups: dict[int, list] = {}
    for i, item in enumerate(items):
        groups.setdefault(ds.find(i), []).append(item)
    return [groups[k] for k in sorted(groups)]


def _canonical(events):
    return sorted(events, key=lambda e: (e.prefix, e.direction, e.kind, e.start_epoch, e.end_epoch))


def consolidate(
    events_by_server: Mapping[str, Iterable[DetectedEvent]], min_overlap: float = MIN_OVERLAP
) -> list[ConsolidatedEvent]:
    """Merge same-prefix events that overlap in time across servers.

    Servers are folded in sorted server_id order onto the first server's
    events. Events and single spikes, and the two directions, are
    consolidated separately. A merged event spans the earliest start to the
    latest end and takes the best class among its constituents.
    """
    groups: dict[tuple[str, str, str], list[tuple[str, DetectedEvent]]] = {}
    for sid in sorted(events_by_server):
        for ev in sorted(events_by_server[sid], key=lambda e: (e.start_epoch, e.end_epoch)):
            if ev.confidence_class not in CLASSES[:3]:
                continue
            groups.setdefault((ev.prefix, ev.direction, ev.kind), []).append((sid, ev))
    out = []
    for (prefix, direction, kind), members in groups.items():
        for chain in merge_overlapping([ev for _, ev in members], min_overlap):
            ids = {id(ev) for ev in chain}
            out.append(ConsolidatedEvent(
                prefix=prefix,
                direction=direction,
                kind=kind,
                start_epoch=min(e.start_epoch for e in chain),
                end_epoch=max(e.end_epoch for e in chain),
                confidence_class=best_class(e.confidence_class for e in chain),
                contributing_servers={sid for sid, ev in members if id(ev) in ids},
                constituent_event_count=len(chain),
                client_count=max(e.client_count for e in chain),
            ))
    return _canonical(out)


def aggregate(
    consolidated: Iterable[ConsolidatedEvent],
    table: PrefixTable,
    min_constituents: int = 2,
    min_overlap: float = MIN_OVERLAP,
) -> tuple[list[AggregatedEvent], list[str]]:
    """Roll consolidated /24 and /96 events up to their announced BGP prefix.

    Only ``kind == "event"`` entries take part. Announced prefixes need at
    least ``min_constituents`` distinct cluster prefixes; within one, events
    are merged by temporal overlap and a merged group is emitted only if it
    still spans ``min_constituents`` cluster prefixes. Returns the aggregated
    events and the sorted list of cluster prefixes with no table match.
    """
    if len(table) == 0:
        raise PrefixTableError("prefix table is empty")
    by_announced: dict[tuple[str, str], list[ConsolidatedEvent]] = {}
    asn_of: dict[str, int] = {}
    unmatched: set[str] = set()
    cache: dict[str, object] = {}
    for ev in consolidated:
        if ev.kind != "event":
            continue
        if ev.prefix not in cache:
            cache[ev.prefix] = table.lookup(ev.prefix)
        entry = cache[ev.prefix]
        if entry is None:
            unmatched.add(ev.prefix)
            continue
        asn_of[entry.prefix] = entry.asn
        by_announced.setdefault((entry.prefix, ev.direction), []).append(ev)
    out = []
    for (announced, direction), events in by_announced.items():
        if len({e.prefix for e in events}) < min_constituents:
            continue
        events = sorted(events, key=lambda e: (e.start_epoch, e.end_epoch, e.prefix))
        for chain in merge_overlapping(events, min_overlap):
            prefixes = {e.prefix for e in chain}
            if len(prefixes) < min_constituents:
                continue
            out.append(AggregatedEvent(
                announced_prefix=announced,
                asn=asn_of[announced],
                direction=direction,
                start_epoch=min(e.start_epoch for e in chain),
                end_epoch=max(e.end_epoch for e in chain),
                confidence_class=best_class(e.confidence_class for e in chain),
                constituent_prefixes=prefixes,
                constituent_event_count=sum(e.constituent_event_count for e in chain),
            ))
    out.sort(key=lambda a: (a.announced_prefix, a.direction, a.start_epoch))
    return out, sorted(unmatched)


@dataclass(frozen=True)
class AsRank:
    rank: int
    asn: int
    name: str
    count: int


def load_as_names(path: str | os.PathLike) -> dict[int, str]:
    """``ASN<sep>name`` per line, separator TAB, comma or ``|``."""
    names = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            for sep in ("\t", "|", ","):
                if sep in line:
                    asn, name = line.split(sep, 1)
                    break
            else:
                asn, _, name = line.partition(" ")
            asn = asn.strip().upper().removeprefix("AS")
            if asn.isdigit():
                names[int(asn)] = name.strip()
    return names


def rank_ases(
    aggregated: Iterable[AggregatedEvent], top_n: int = 5, names: Mapping[int, str] | None = None
) -> list[AsRank]:
    counts: dict[int, int] = {}
    for ev in aggregated:
        counts[ev.asn] = counts.get(ev.asn, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    names = names or {}
    return [AsRank(i + 1, asn, names.get(asn, ""), n) for i, (asn, n) in enumerate(ordered)]


# --------------------------------------------------------------------------- files

def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


CONSOLIDATED_COLUMNS = ("prefix", "direction", "kind", "start_epoch", "end_epoch", "class",
                        "servers", "constituent_events", "client_count")


def write_consolidated(events: Iterable[ConsolidatedEvent], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONSOLIDATED_COLUMNS)
        for e in _canonical(events):
            w.writerow([e.prefix, e.direction, e.kind, _num(e.start_epoch), _num(e.end_epoch),
                        e.confidence_class, ";".join(sorted(e.contributing_servers)),
                        e.constituent_event_count, e.client_count])


def read_consolidated(path: str | os.PathLike) -> list[ConsolidatedEvent]:
    with open(path, newline="") as fh:
        return [
            ConsolidatedEvent(
                prefix=r["prefix"], direction=r["direction"], kind=r["kind"],
                start_epoch=float(r["start_epoch"]), end_epoch=float(r["end_epoch"]),
                confidence_class=r["class"],
                contributing_servers=set(filter(None, r["servers"].split(";"))),
                constituent_event_count=int(r["constituent_events"]),
                client_count=int(r.get("client_count") or 0),
            )
            for r in csv.DictReader(fh)
        ]


AGGREGATED_COLUMNS = ("announced_prefix", "asn", "direction", "start_epoch", "end_epoch", "class",
                      "constituent_prefixes", "constituent_events")


def write_aggregated(events: Iterable[AggregatedEvent], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATED_COLUMNS)
        for e in events:
            w.writerow([e.announced_prefix, e.asn, e.direction, _num(e.start_epoch), _num(e.end_epoch),
                        e.confidence_class, ";".join(sorted(e.constituent_prefixes)),
                        e.constituent_event_count])


def read_aggregated(path: str | os.PathLike) -> list[AggregatedEvent]:
    with open(path, newline="") as fh:
        return [
            AggregatedEvent(
                announced_prefix=r["announced_prefix"], asn=int(r["asn"]), direction=r["direction"],
                start_epoch=float(r["start_epoch"]), end_epoch=float(r["end_epoch"]),
                confidence_class=r["class"],
                constituent_prefixes=set(filter(None, r["constituent_prefixes"].split(";"))),
                constituent_event_count=int(r["constituent_events"]),
            )
            for r in csv.DictReader(fh)
        ]


def write_ranking(ranking: Iterable[AsRank], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "asn", "name", "count"))
        for r in ranking:
            w.writerow((r.rank, r.asn, r.name, r.count))
