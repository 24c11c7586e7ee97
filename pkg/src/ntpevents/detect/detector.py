"""Per-cluster event detection and the event/matrix details files."""

from __future__ import annotations

import csv
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ..owd import PrefixCluster
from .events import DetectedEvent, class_for_correlation, event_correlation, extract_events, zscore_outliers
from .matrix import ClusterMatrix, ClusterSkipped, MatrixError, build_matrix
from .rpca import DegenerateMatrixError, RpcaFailure, RpcaParams, rpca_flags, select_top_k

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorParams:
    rpca: RpcaParams = RpcaParams()
    z_threshold: float = 2.0
    bridge_gaps: int = 0  # bridge runs across this many removed all-NA bins


@dataclass
class ClusterDetection:
    prefix: str
    direction: str
    server_id: str
    client_count: int
    events: list[DetectedEvent] = field(default_factory=list)
    discarded_d: int = 0
    matrix: ClusterMatrix | None = None
    method: str | None = None
    k: int | None = None
    skip_reason: str | None = None


def cluster_rng(seed: int, server_id: str, direction: str, prefix: str) -> np.random.Generator:
    """Seed depends only on the cluster identity, never on processing order."""
    tag = zlib.crc32(f"{server_id}|{direction}|{prefix}".encode())
    return np.random.default_rng([seed, tag])


def detect_cluster(
    cluster: PrefixCluster,
    window: tuple[float, float],
    params: DetectorParams = DetectorParams(),
    seed: int = 0,
) -> ClusterDetection:
    out = ClusterDetection(cluster.prefix, cluster.direction, cluster.server_id, cluster.n)
    try:
        matrix = build_matrix(cluster, *window)
        out.matrix = matrix
        out.client_count = len(matrix.client_order)
        if matrix.values.shape[0] < 2:
            raise ClusterSkipped("too_few_bins")
        k = select_top_k(matrix.values, params.rpca.variance_threshold)
        res = rpca_flags(matrix.values, k, params.rpca,
                         cluster_rng(seed, cluster.server_id, cluster.direction, cluster.prefix))
    except ClusterSkipped as exc:
        out.skip_reason = exc.reason
        return out
    except MatrixError:
        out.skip_reason = "window_shorter_than_bin"
        return out
    except DegenerateMatrixError:
        out.skip_reason = "degenerate_matrix"
        return out
    except RpcaFailure:
        out.skip_reason = "rpca_failed"
        return out
    out.method, out.k = res.method, res.k
    z_mask = zscore_outliers(matrix.values, params.z_threshold)
    for run in extract_events(res.flags, matrix.time_bins, matrix.bin_width, matrix.bin_index,
                              params.bridge_gaps):
        corr = event_correlation(run.outlier_bins, z_mask)
        cls = class_for_correlation(corr)
        if cls == "D":
            out.discarded_d += 1
            continue
        out.events.append(DetectedEvent(
            prefix=cluster.prefix,
            direction=cluster.direction,
            start_epoch=run.start_epoch,
            end_epoch=run.end_epoch,
            kind=run.kind,
            confidence_class=cls,
            client_count=out.client_count,
            server_id=cluster.server_id,
            outlier_bins=list(run.outlier_bins),
            correlation=corr,
        ))
    return out


def _detect_star(args):
    return detect_cluster(*args)


def detect_clusters(
    clusters: Iterable[PrefixCluster],
    window: tuple[float, float],
    params: DetectorParams = DetectorParams(),
    seed: int = 0,
    workers: int = 1,
) -> list[ClusterDetection]:
    """Run detection over many clusters; output order is canonical regardless of ``workers``."""
    jobs = [(c, window, params, seed) for c in clusters]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_detect_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [detect_cluster(*job) for job in jobs]
    results.sort(key=lambda r: (r.server_id, r.direction, r.prefix))
    return results


def canonical_events(events: Iterable[DetectedEvent]) -> list[DetectedEvent]:
    return sorted(events, key=lambda e: (e.prefix, e.start_epoch, e.direction, e.server_id, e.kind))


# --------------------------------------------------------------------------- files

EVENT_COLUMNS = ("prefix", "client_count", "start_epoch", "end_epoch", "class", "kind")


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def event_file_name(server_id: str, day: str, direction: str) -> str:
    return f"events_{server_id}_{day}_{direction}.csv"


def write_events(events: Iterable[DetectedEvent], path: str | os.PathLike) -> int:
    rows = canonical_events(events)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for e in rows:
            w.writerow([e.prefix, e.client_count, _num(e.start_epoch), _num(e.end_epoch),
                        e.confidence_class, e.kind])
    return len(rows)


def read_events(path: str | os.PathLike, server_id: str = "", direction: str = "") -> list[DetectedEvent]:
    """Read an event details file; server and direction default to the file name fields."""
    path = Path(path)
    parts = path.stem.split("_")
    if len(parts) >= 4 and parts[0] == "events":
        server_id = server_id or "_".join(parts[1:-2])
        direction = direction or parts[-1]
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(DetectedEvent(
                prefix=row["prefix"],
                direction=direction,
                start_epoch=float(row["start_epoch"]),
                end_epoch=float(row["end_epoch"]),
                kind=row["kind"],
                confidence_class=row["class"],
                client_count=int(row["client_count"]),
                server_id=server_id,
            ))
    return out


def matrix_to_dict(m: ClusterMatrix) -> dict:
    return {
        "server_id": m.server_id,
        "direction": m.direction,
        "prefix": m.prefix,
        "poll_exponent": m.poll_exponent,
        "bin_width": m.bin_width,
        "window": list(m.window),
        "time_bins": [float(t) for t in m.time_bins],
        "bin_index": [int(i) for i in m.bin_index],
        "client_order": list(m.client_order),
        "values": m.values.tolist(),
        "na_mask": m.na_mask.astype(int).tolist(),
    }


def matrix_from_dict(d: dict) -> ClusterMatrix:
    return ClusterMatrix(
        prefix=d["prefix"],
        direction=d["direction"],
        server_id=d["server_id"],
        poll_exponent=int(d["poll_exponent"]),
        bin_width=float(d["bin_width"]),
        window=tuple(d["window"]),
        time_bins=np.asarray(d["time_bins"], dtype=float),
        bin_index=np.asarray(d["bin_index"], dtype=np.int64),
        values=np.asarray(d["values"], dtype=float).reshape(len(d["time_bins"]), len(d["client_order"])),
        na_mask=np.asarray(d["na_mask"], dtype=bool).reshape(len(d["time_bins"]), len(d["client_order"])),
        client_order=list(d["client_order"]),
    )


def write_matrix_details(matrices: Iterable[ClusterMatrix], path: str | os.PathLike) -> int:
    """JSON lines, one cluster matrix per line."""
    n = 0
    with open(path, "w") as fh:
        for m in sorted(matrices, key=lambda m: (m.server_id, m.direction, m.prefix)):
            fh.write(json.dumps(matrix_to_dict(m), sort_keys=True) + "\n")
            n += 1
    return n


def read_matrix_details(path: str | os.PathLike) -> list[ClusterMatrix]:
    with open(path) as fh:
        return [matrix_from_dict(json.loads(line)) for line in fh if line.strip()]
