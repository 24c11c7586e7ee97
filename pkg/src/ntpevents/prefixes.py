"""Announced-prefix tables (CAIDA pfx2as / Team Cymru style) with longest-prefix match."""

from __future__ import annotations

import ipaddress
import logging
import os
import re
from dataclasses import dataclass
from typing import Iterable

log = logging.getLogger(__name__)

SOURCES = ("CAIDA", "Cymru")


class PrefixTableError(ValueError):
    pass


@dataclass(frozen=True)
class PrefixEntry:
    prefix: str
    length: int
    asn: int
    source: str = "CAIDA"

    @property
    def network(self):
        return ipaddress.ip_network(self.prefix)


def _first_asn(field: str, where: str) -> int:
    """Multi-origin fields (``1_2``, ``1,2``, ``{1,2}``) resolve to the first ASN."""
    tokens = [t for t in re.split(r"[_,{}\s]+", field.strip()) if t]
    if not tokens:
        raise PrefixTableError(f"{where}: empty ASN field")
    if len(tokens) > 1:
        log.info("%s: multi-origin ASN %r resolved to %s", where, field, tokens[0])
    return int(tokens[0].upper().removeprefix("AS"))


def parse_caida(lines: Iterable[str], source: str = "CAIDA") -> list[PrefixEntry]:
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise PrefixTableError(f"line {n}: expected 'prefix<TAB>length<TAB>ASN'")
        net = ipaddress.ip_network(f"{parts[0]}/{parts[1]}", strict=False)
        out.append(PrefixEntry(str(net), net.prefixlen, _first_asn(parts[2], f"line {n}"), source))
    return out


def parse_cymru(lines: Iterable[str], source: str = "Cymru") -> list[PrefixEntry]:
    """``ASN | prefix`` lines; extra ``|`` columns are ignored, a header line is skipped."""
    out = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) < 2:
            raise PrefixTableError(f"line {n}: expected 'ASN | prefix'")
        if not parts[0].upper().removeprefix("AS").replace("_", "").replace(",", "").isdigit():
            if n == 1:
                continue  # header
            raise PrefixTableError(f"line {n}: bad ASN {parts[0]!r}")
        net = ipaddress.ip_network(parts[1], strict=False)
        out.append(PrefixEntry(str(net), net.prefixlen, _first_asn(parts[0], f"line {n}"), source))
    return out


class PrefixTable:
    """Longest-prefix match over one or more sources; earlier sources win."""

    def __init__(self, entries: Iterable[PrefixEntry] = (), source_order: Iterable[str] = SOURCES):
        self.source_order = list(source_order)
        self._by_source: dict[str, dict[tuple[int, int], dict[int, PrefixEntry]]] = {}
        self._lengths: dict[str, dict[int, list[int]]] = {}
        self.entries: list[PrefixEntry] = []
        for e in entries:
            self.add(e)

    def add(self, entry: PrefixEntry) -> None:
        net = entry.network
        table = self._by_source.setdefault(entry.source, {})
        bucket = table.setdefault((net.version, net.prefixlen), {})
        if int(net.network_address) in bucket:
            return  # first listing wins
        bucket[int(net.network_address)] = entry
        lengths = self._lengths.setdefault(entry.source, {}).setdefault(net.version, [])
        if net.prefixlen not in lengths:
            lengths.append(net.prefixlen)
            lengths.sort(reverse=True)
        if entry.source not in self.source_order:
            self.source_order.append(entry.source)
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def load(cls, caida: str | os.PathLike | None = None, cymru: str | os.PathLike | None = None) -> "PrefixTable":
        entries: list[PrefixEntry] = []
        if caida:
            with open(caida) as fh:
                entries += parse_caida(fh)
        if cymru:
            with open(cymru) as fh:
                entries += parse_cymru(fh)
        return cls(entries)

    def lookup(self, network: str) -> PrefixEntry | None:
        """Most specific announced prefix covering all of ``network`` (an address or prefix)."""
        net = ipaddress.ip_network(network, strict=False)
        addr = int(net.network_address)
        bits = net.max_prefixlen
        for source in self.source_order:
            table = self._by_source.get(source)
            if not table:
                continue
            for length in self._lengths[source].get(net.version, ()):
                if length > net.prefixlen:
                    continue
                mask = ((1 << bits) - 1) ^ ((1 << (bits - length)) - 1)
                hit = table[(net.version, length)].get(addr & mask)
                if hit is not None:
                    return hit
        return None
