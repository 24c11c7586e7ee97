from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..owd import PrefixCluster


class MatrixError(ValueError):
    pass


class ClusterSkipped(Exception):
    """Raised when a cluster cannot be analyzed; ``reason`` is a short code."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass
class ClusterMatrix:
    prefix: str
    direction: str
    server_id: str
    poll_exponent: int
    bin_width: float
    window: tuple[float, float]
    time_bins: np.ndarray  # start epoch of each retained row
    bin_index: np.ndarray  # position of each retained row in the full bin grid
    values: np.ndarray  # t' x n, NA already filled
    na_mask: np.ndarray  # True where the cell was NA before filling
    client_order: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def median_least_poll(min_polls) -> int:
    """Median of per-client minimum poll exponents (lower median for even counts)."""
    ordered = sorted(int(p) for p in min_polls)
    if not ordered:
        raise ValueError("no poll values")
    return ordered[(len(ordered) - 1) // 2]


def build_matrix(cluster: PrefixCluster, window_start: float, window_end: float) -> ClusterMatrix:
    """Bin a cluster's delays into a t' x n matrix of per-bin maximum OWD.

    Bins are 2**t seconds wide, t being the median of the clients' minimum
    poll exponents, and tile [window_start, window_end). Rows with no sample
    from any client are removed, then remaining empty cells take the client's
    minimum OWD over the window.
    """
    t = median_least_poll(c.min_poll for c in cluster.clients)
    width = 2.0 ** t
    if window_end - window_start < width:
        raise MatrixError(f"window of {window_end - window_start}s shorter than one {width}s bin")
    nbins = math.ceil((window_end - window_start) / width)

    columns, mins, order = [], [], []
    for client in cluster.clients:
        ts, owd = client.timestamps, client.owd
        inside = (ts >= window_start) & (ts < window_end)
        if not inside.any():
            continue
        idx = ((ts[inside] - window_start) // width).astype(np.int64)
        col = np.full(nbins, -np.inf)
        np.maximum.at(col, idx, owd[inside])
        col[np.isneginf(col)] = np.nan
        columns.append(col)
        mins.append(owd[inside].min())
        order.append(client.client_ip)
    if len(columns) < 2:
        raise ClusterSkipped("too_few_clients", f"{len(columns)} client(s) with samples in window")

    full = np.column_stack(columns)
    keep = ~np.isnan(full).all(axis=1)
    if not keep.any():
        raise ClusterSkipped("all_rows_na")
    values = full[keep]
    na_mask = np.isnan(values)
    values = np.where(na_mask, np.asarray(mins)[None, :], values)
    bin_index = np.flatnonzero(keep)
    return ClusterMatrix(
        prefix=cluster.prefix,
        direction=cluster.direction,
        server_id=cluster.server_id,
        poll_exponent=t,
        bin_width=width,
        window=(float(window_start), float(window_end)),
        time_bins=window_start + bin_index * width,
        bin_index=bin_index,
        values=values,
        na_mask=na_mask,
        client_order=order,
    )
