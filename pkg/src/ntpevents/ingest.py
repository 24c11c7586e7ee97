"""Trace ingestion: pcap -> NTP records -> 9-column CSV, integrity filtering, gap monitoring."""

from __future__ import annotations

import csv
import gzip
import io
import ipaddress
import json
import logging
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "packet_number",
    "src_ip",
    "dst_ip",
    "latency",
    "poll_exponent",
    "packet_timestamp",
    "root_delay",
    "rtt",
    "reference_ip",
)

NTP_PORT = 123
NTP_HEADER_LEN = 48
NTP_UNIX_OFFSET = 2208988800  # seconds between 1900-01-01 and 1970-01-01
MAX_ERA_DRIFT = 2**31  # ~68 years
POLL_MIN, POLL_MAX = 0, 17


class PcapFormatError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class NtpPacketRecord:
    packet_number: int
    src_ip: str
    dst_ip: str
    latency: float
    poll_exponent: int
    packet_timestamp: float
    root_delay: float
    rtt: float
    reference_ip: str
    # NTP mode is not part of the CSV schema; only known for records parsed from pcap.
    mode: int | None = field(default=None, compare=False)

    def csv_row(self) -> list[str]:
        return [
            str(self.packet_number),
            self.src_ip,
            self.dst_ip,
            repr(float(self.latency)),
            str(self.poll_exponent),
            repr(float(self.packet_timestamp)),
            repr(float(self.root_delay)),
            repr(float(self.rtt)),
            self.reference_ip,
        ]


@dataclass
class ParseStats:
    frames: int = 0
    udp123: int = 0
    records: int = 0
    short_payload: int = 0
    truncated: int = 0
    client_to_server: int = 0


# --------------------------------------------------------------------------- pcap

_LINK_NULL, _LINK_ETHERNET, _LINK_RAW, _LINK_SLL, _LINK_SLL2 = 0, 1, 101, 113, 276
_RAW_ALIASES = {12, 14, _LINK_RAW}


def _read_trace_bytes(trace) -> bytes:
    if isinstance(trace, (bytes, bytearray, memoryview)):
        data = bytes(trace)
    elif isinstance(trace, (str, os.PathLike)):
        data = Path(trace).read_bytes()
    else:
        data = trace.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _pcap_header(data: bytes) -> tuple[str, int, int]:
    """Returns (byte order, timestamp divisor, link type)."""
    if len(data) < 24:
        raise PcapFormatError("pcap global header truncated")
    magic = data[:4]
    if magic == b"\xd4\xc3\xb2\xa1":
        endian, div = "<", 1_000_000
    elif magic == b"\xa1\xb2\xc3\xd4":
        endian, div = ">", 1_000_000
    elif magic == b"\x4d\x3c\xb2\xa1":
        endian, div = "<", 1_000_000_000
    elif magic == b"\xa1\xb2\x3c\x4d":
        endian, div = ">", 1_000_000_000
    else:
        raise PcapFormatError(f"bad pcap magic {magic.hex()}")
    (linktype,) = struct.unpack_from(endian + "I", data, 20)
    return endian, div, linktype & 0x0FFFFFFF


def iter_pcap(data: bytes) -> Iterator[tuple[int, float, bytes, bool]]:
    """Yield (frame number, capture time, frame bytes, truncated) for every frame.

    A frame whose record header claims more bytes than remain in the file is
    yielded once with truncated=True and iteration stops.
    """
    endian, div, _ = _pcap_header(data)
    rec = struct.Struct(endian + "IIII")
    off, n = 24, 0
    while off < len(data):
        n += 1
        if off + 16 > len(data):
            yield n, math.nan, b"", True
            return
        sec, frac, incl, _orig = rec.unpack_from(data, off)
        off += 16
        if off + incl > len(data):
            yield n, sec + frac / div, data[off:], True
            return
        frame = data[off : off + incl]
        off += incl
        if div == 1_000_000_000:
            ts = sec + round(frac / 1000) / 1_000_000
        else:
            ts = sec + frac / 1_000_000
        yield n, ts, frame, False


def _ip_layer(frame: bytes, linktype: int) -> tuple[int, bytes] | None:
    """Strip the link layer; return (ip version, ip packet)."""
    if linktype == _LINK_ETHERNET:
        if len(frame) < 14:
            return None
        etype = int.from_bytes(frame[12:14], "big")
        off = 14
        while etype in (0x8100, 0x88A8) and len(frame) >= off + 4:
            etype = int.from_bytes(frame[off + 2 : off + 4], "big")
            off += 4
        payload = frame[off:]
        if etype == 0x0800:
            return 4, payload
        if etype == 0x86DD:
            return 6, payload
        return None
    if linktype == _LINK_SLL:
        if len(frame) < 16:
            return None
        etype, payload = int.from_bytes(frame[14:16], "big"), frame[16:]
    elif linktype == _LINK_SLL2:
        if len(frame) < 20:
            return None
        etype, payload = int.from_bytes(frame[0:2], "big"), frame[20:]
    elif linktype == _LINK_NULL:
        if len(frame) < 4:
            return None
        family = int.from_bytes(frame[:4], "little")
        if family > 0xFFFF:
            family = int.from_bytes(frame[:4], "big")
        payload = frame[4:]
        etype = 0x0800 if family == 2 else 0x86DD if family in (10, 24, 28, 30) else 0
    elif linktype in _RAW_ALIASES:
        if not frame:
            return None
        version = frame[0] >> 4
        return (version, frame) if version in (4, 6) else None
    else:
        raise PcapFormatError(f"unsupported link type {linktype}")
    if etype == 0x0800:
        return 4, payload
    if etype == 0x86DD:
        return 6, payload
    return None


_IPV6_EXT = {0, 43, 60}


def _udp_segment(version: int, pkt: bytes) -> tuple[str, str, bytes] | None:
    if version == 4:
        if len(pkt) < 20:
            return None
        ihl = (pkt[0] & 0x0F) * 4
        if pkt[9] != 17 or len(pkt) < ihl:
            return None
        flags_frag = int.from_bytes(pkt[6:8], "big")
        if flags_frag & 0x1FFF:
            return None  # non-first fragment
        total = int.from_bytes(pkt[2:4], "big")
        src = str(ipaddress.IPv4Address(pkt[12:16]))
        dst = str(ipaddress.IPv4Address(pkt[16:20]))
        return src, dst, pkt[ihl : max(total, ihl)] if total else pkt[ihl:]
    if len(pkt) < 40:
        return None
    nxt = pkt[6]
    plen = int.from_bytes(pkt[4:6], "big")
    src = str(ipaddress.IPv6Address(pkt[8:24]))
    dst = str(ipaddress.IPv6Address(pkt[24:40]))
    body = pkt[40 : 40 + plen] if plen else pkt[40:]
    while nxt in _IPV6_EXT and len(body) >= 8:
        nxt, hlen = body[0], (body[1] + 1) * 8
        body = body[hlen:]
    if nxt != 17:
        return None
    return src, dst, body


def _ntp_time(raw: int, pivot: float) -> float:
    if raw == 0:
        return math.nan
    value = (raw >> 32) - NTP_UNIX_OFFSET + (raw & 0xFFFFFFFF) / 2**32
    if abs(value - pivot) > MAX_ERA_DRIFT:
        return math.nan
    return value


def _reference_id(raw: bytes, stratum: int) -> str:
    if stratum < 2:
        token = raw.rstrip(b"\x00")
        if token and all(32 < b < 127 and b != 44 for b in token):
            return token.decode("ascii")
    return str(ipaddress.IPv4Address(raw))


_NTP = struct.Struct(">BBbbII4sQQQQ")


def decode_ntp(payload: bytes, number: int, src: str, dst: str, captured: float) -> NtpPacketRecord:
    """Decode a >= 48 byte NTP header into one record."""
    (flags, stratum, poll, _prec, root_delay, _disp, refid,
     _ref_ts, origin, receive, transmit) = _NTP.unpack_from(payload)
    o = _ntp_time(origin, captured)
    r = _ntp_time(receive, captured)
    x = _ntp_time(transmit, captured)
    if math.isnan(o) or math.isnan(r):
        latency = math.nan
    else:
        # exact fixed-point difference keeps sub-microsecond precision
        latency = (origin - receive) / 2**32
    rtt = (captured - o) - (x - r)
    return NtpPacketRecord(
        packet_number=number,
        src_ip=src,
        dst_ip=dst,
        latency=latency,
        poll_exponent=poll,
        packet_timestamp=captured,
        root_delay=root_delay / 65536.0,
        rtt=rtt,
        reference_ip=_reference_id(refid, stratum),
        mode=flags & 0x07,
    )


def parse_pcap(trace, server_ip: str | None = None) -> tuple[list[NtpPacketRecord], ParseStats]:
    """Parse a (optionally gzipped) pcap trace into NTP records.

    Every UDP datagram on port 123 yields a record unless its payload is
    shorter than an NTP header, in which case it is counted in
    ``stats.short_payload``. A truncated final frame is counted in
    ``stats.truncated``.
    """
    data = _read_trace_bytes(trace)
    _, _, linktype = _pcap_header(data)
    server = str(ipaddress.ip_address(server_ip)) if server_ip else None
    stats = ParseStats()
    records: list[NtpPacketRecord] = []
    for number, ts, frame, truncated in iter_pcap(data):
        stats.frames += 1
        if truncated:
            stats.truncated += 1
            log.warning("frame %d truncated at end of trace", number)
            continue
        ip = _ip_layer(frame, linktype)
        if ip is None:
            continue
        seg = _udp_segment(*ip)
        if seg is None or len(seg[2]) < 8:
            continue
        src, dst, udp = seg
        sport, dport, ulen = struct.unpack_from(">HHH", udp)
        if NTP_PORT not in (sport, dport):
            continue
        stats.udp123 += 1
        payload = udp[8:ulen] if ulen >= 8 else udp[8:]
        if len(payload) < NTP_HEADER_LEN:
            stats.short_payload += 1
            continue
        rec = decode_ntp(payload, number, src, dst, ts)
        if server is not None and rec.dst_ip == server and rec.mode == 3:
            stats.client_to_server += 1
        records.append(rec)
    stats.records = len(records)
    return records, stats


# --------------------------------------------------------------------------- csv

def write_csv(records: Iterable[NtpPacketRecord], stream: IO[str]) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    n = 0
    for rec in records:
        writer.writerow(rec.csv_row())
        n += 1
    return n


def records_to_csv(records: Iterable[NtpPacketRecord]) -> bytes:
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue().encode("utf-8")


def _parse_row(row: list[str]) -> NtpPacketRecord:
    return NtpPacketRecord(
        packet_number=int(row[0]),
        src_ip=row[1],
        dst_ip=row[2],
        latency=float(row[3]),
        poll_exponent=int(row[4]),
        packet_timestamp=float(row[5]),
        root_delay=float(row[6]),
        rtt=float(row[7]),
        reference_ip=row[8],
    )


def read_csv(stream: IO[str] | bytes | str | os.PathLike) -> tuple[list[NtpPacketRecord], int]:
    """Read the 9-column CSV. Returns (records, corrupted row count)."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.StringIO(stream.decode("utf-8"))
    elif isinstance(stream, (str, os.PathLike)):
        with open(stream, newline="", encoding="utf-8") as fh:
            return read_csv(fh)
    records, bad = [], 0
    for i, row in enumerate(csv.reader(stream)):
        if i == 0 and row and row[0] == CSV_COLUMNS[0]:
            continue
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            bad += 1
            continue
        try:
            records.append(_parse_row(row))
        except ValueError:
            bad += 1
    return records, bad


_FRAME_SCHEMA = {
    "packet_number": pa.int64(),
    "src_ip": pa.string(),
    "dst_ip": pa.string(),
    "latency": pa.float64(),
    "poll_exponent": pa.int64(),
    "packet_timestamp": pa.float64(),
    "root_delay": pa.float64(),
    "rtt": pa.float64(),
    "reference_ip": pa.string(),
}


def read_csv_frame(path: str | os.PathLike) -> tuple[pd.DataFrame, int]:
    """Columnar CSV reader for large traces. Returns (frame, rejected row count)."""
    rejected = 0

    def _skip(_row) -> str:
        nonlocal rejected
        rejected += 1
        return "skip"

    table = pacsv.read_csv(
        path,
        parse_options=pacsv.ParseOptions(invalid_row_handler=_skip),
        convert_options=pacsv.ConvertOptions(column_types=_FRAME_SCHEMA, strings_can_be_null=False),
    )
    return table.to_pandas(), rejected


def write_csv_frame(frame: pd.DataFrame, path: str | os.PathLike) -> None:
    table = pa.Table.from_pandas(frame[list(CSV_COLUMNS)], preserve_index=False)
    pacsv.write_csv(table, path, write_options=pacsv.WriteOptions(quoting_style="none"))


_NUMERIC = {
    "packet_number": "int64",
    "latency": "float64",
    "poll_exponent": "int64",
    "packet_timestamp": "float64",
    "root_delay": "float64",
    "rtt": "float64",
}


def records_to_frame(records: Iterable[NtpPacketRecord]) -> pd.DataFrame:
    records = list(records)
    frame = pd.DataFrame({col: [getattr(r, col) for r in records] for col in CSV_COLUMNS})
    frame = frame.astype(_NUMERIC)
    frame["mode"] = pd.array([r.mode for r in records], dtype="Int64")
    return frame


def frame_to_records(frame: pd.DataFrame) -> list[NtpPacketRecord]:
    cols = [frame[c].tolist() for c in CSV_COLUMNS]
    return [NtpPacketRecord(*row) for row in zip(*cols)]


def to_ntp_timestamp(unix_seconds: float) -> int:
    sec = math.floor(unix_seconds)
    frac = round((unix_seconds - sec) * 2**32)
    if frac >= 2**32:
        sec, frac = sec + 1, frac - 2**32
    return ((sec + NTP_UNIX_OFFSET) << 32) | frac


def build_ntp_payload(
    *,
    mode: int = 3,
    version: int = 4,
    stratum: int = 2,
    poll: int = 6,
    root_delay_raw: int = 0,
    reference: bytes = b"\x00\x00\x00\x00",
    origin: int = 0,
    receive: int = 0,
    transmit: int = 0,
) -> bytes:
    """48-byte NTP header with raw 64-bit timestamps and raw 16.16 root delay."""
    return _NTP.pack((version << 3) | mode, stratum, poll, -20, root_delay_raw, 0,
                     reference, 0, origin, receive, transmit)


def udp_frame(src: str, dst: str, sport: int, dport: int, payload: bytes) -> bytes:
    """Ethernet + IPv4/IPv6 + UDP frame (checksums left zero)."""
    a, b = ipaddress.ip_address(src), ipaddress.ip_address(dst)
    udp = struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload
    if a.version == 4:
        ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, 20 + len(udp), 0, 0x4000, 64, 17, 0,
                         a.packed, b.packed)
        etype = 0x0800
    else:
        ip = struct.pack(">IHBB16s16s", 6 << 28, len(udp), 17, 64, a.packed, b.packed)
        etype = 0x86DD
    return b"\x02" * 6 + b"\x04" * 6 + etype.to_bytes(2, "big") + ip + udp


class PcapWriter:
    """Minimal little-endian microsecond pcap writer (Ethernet link type)."""

    def __init__(self, stream: IO[bytes], snaplen: int = 65535):
        self.stream = stream
        stream.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, snaplen, _LINK_ETHERNET))

    def write(self, frame: bytes, ts: float, *, orig_len: int | None = None) -> None:
        sec = math.floor(ts)
        usec = round((ts - sec) * 1_000_000)
        if usec >= 1_000_000:
            sec, usec = sec + 1, usec - 1_000_000
        self.stream.write(struct.pack("<IIII", sec, usec, len(frame), orig_len or len(frame)))
        self.stream.write(frame)


# --------------------------------------------------------------------------- integrity

def _valid_ip(text: str) -> bool:
    try:
        return not ipaddress.ip_address(text).is_unspecified
    except ValueError:
        return False


def is_clean(rec: NtpPacketRecord) -> bool:
    for value in (rec.latency, rec.root_delay, rec.rtt):
        if not (math.isfinite(value) and value >= 0):
            return False
    if not POLL_MIN <= rec.poll_exponent <= POLL_MAX:
        return False
    return _valid_ip(rec.src_ip) and _valid_ip(rec.dst_ip)


def integrity_filter(records: Iterable[NtpPacketRecord]) -> tuple[list[NtpPacketRecord], int]:
    clean, rejected = [], 0
    for rec in records:
        if is_clean(rec):
            clean.append(rec)
        else:
            rejected += 1
    return clean, rejected


def integrity_filter_frame(frame: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    """Vectorized equivalent of :func:`integrity_filter`."""
    keep = np.ones(len(frame), dtype=bool)
    for col in ("latency", "root_delay", "rtt"):
        v = frame[col].to_numpy(dtype=float)
        with np.errstate(invalid="ignore"):
            keep &= np.isfinite(v) & (v >= 0)
    poll = frame["poll_exponent"].to_numpy()
    keep &= (poll >= POLL_MIN) & (poll <= POLL_MAX)
    for col in ("src_ip", "dst_ip"):
        codes, uniques = pd.factorize(frame[col], use_na_sentinel=True)
        ok = np.fromiter((_valid_ip(str(u)) for u in uniques), dtype=bool, count=len(uniques))
        keep &= (codes >= 0) & ok[np.maximum(codes, 0)]
    rejected = int((~keep).sum())
    if rejected == 0:
        return frame, 0
    return frame.loc[keep].reset_index(drop=True), rejected


# --------------------------------------------------------------------------- gaps

@dataclass
class TraceManifest:
    server_id: str
    epoch_start: int
    epoch_length: int = 3600
    expected_files: int = 0
    received_files: int = 0
    missing_epochs: list[int] = field(default_factory=list)


TRACE_NAME = re.compile(r"(\d{9,11})\.pcap(?:\.gz)?$")


def trace_file_name(server_id: str, epoch: int, compressed: bool = False) -> str:
    return f"{server_id}-{epoch}.pcap" + (".gz" if compressed else "")


def month_dir(epoch: int) -> str:
    return pd.Timestamp(epoch, unit="s").strftime("%Y-%m")


def scan_traces(server_dir: str | os.PathLike) -> dict[int, Path]:
    """Map epoch start -> trace path for a server's month-organized trace directory."""
    found: dict[int, Path] = {}
    root = Path(server_dir)
    if not root.is_dir():
        return found
    for path in sorted(root.rglob("*")):
        m = TRACE_NAME.search(path.name)
        if m and path.is_file():
            found.setdefault(int(m.group(1)), path)
    return found


def gap_monitor(
    manifest_dir: str | os.PathLike,
    expected_servers: Iterable[str],
    epoch_length: int = 3600,
    window_start: int | None = None,
    window_end: int | None = None,
    server_dirs: dict[str, str | os.PathLike] | None = None,
) -> dict[str, TraceManifest]:
    """Check trace delivery for each server over [window_start, window_end).

    Traces live at ``<manifest_dir>/<server_id>/<YYYY-MM>/<server_id>-<epoch>.pcap[.gz]``
    unless ``server_dirs`` overrides a server's directory. Without an explicit
    window, the span of all observed epochs is monitored.
    """
    root = Path(manifest_dir)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise OSError(f"trace directory {root} is not readable")
    servers = sorted(set(expected_servers))
    server_dirs = server_dirs or {}
    seen = {s: scan_traces(server_dirs.get(s, root / s)) for s in servers}
    if window_start is None or window_end is None:
        epochs = [e for found in seen.values() for e in found]
        if not epochs:
            return {s: TraceManifest(s, window_start or 0, epoch_length) for s in servers}
        window_start = min(epochs) if window_start is None else window_start
        window_end = max(epochs) + epoch_length if window_end is None else window_end
    expected = list(range(window_start, window_end, epoch_length))
    out = {}
    for s in servers:
        missing = [e for e in expected if e not in seen[s]]
        out[s] = TraceManifest(
            server_id=s,
            epoch_start=window_start,
            epoch_length=epoch_length,
            expected_files=len(expected),
            received_files=len(expected) - len(missing),
            missing_epochs=missing,
        )
    return out


def write_gap_report(manifests: dict[str, TraceManifest], stream: IO[str]) -> int:
    """JSON lines, one {server_id, missing_epoch} per gap. Returns the gap count."""
    n = 0
    for sid in sorted(manifests):
        for epoch in manifests[sid].missing_epochs:
            stream.write(json.dumps({"server_id": sid, "missing_epoch": epoch}) + "\n")
            n += 1
    return n
