from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLASSES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class EventRun:
    start_epoch: float
    end_epoch: float
    kind: str  # "event" | "single_spike"
    outlier_bins: tuple[int, ...]  # indices into the retained rows


@dataclass
class DetectedEvent:
    prefix: str
    direction: str
    start_epoch: float
    end_epoch: float
    kind: str
    confidence_class: str
    client_count: int
    server_id: str
    outlier_bins: list[int] = field(default_factory=list)
    correlation: float | None = None

    @property
    def duration(self) -> float:
        return self.end_epoch - self.start_epoch


def extract_events(flags, time_bins, bin_width: float, bin_index=None, bridge_gaps: int = 0) -> list[EventRun]:
    """Turn runs of ``False`` flags into events (>= 2 bins) and single spikes (1 bin).

    ``bin_index`` gives each retained row's position in the full bin grid;
    a run is split wherever removed rows separate two retained rows, unless
    the gap is at most ``bridge_gaps`` bins.
    """
    flags = np.asarray(flags, dtype=bool)
    time_bins = np.asarray(time_bins, dtype=float)
    if bin_index is None:
        bin_index = np.rint((time_bins - (time_bins[0] if len(time_bins) else 0)) / bin_width).astype(np.int64)
    bin_index = np.asarray(bin_index)
    runs: list[EventRun] = []
    current: list[int] = []

    def close():
        if current:
            kind = "single_spike" if len(current) == 1 else "event"
            runs.append(EventRun(float(time_bins[current[0]]), float(time_bins[current[-1]] + bin_width),
                                 kind, tuple(current)))
            current.clear()

    for i, ok in enumerate(flags):
        if ok:
            close()
            continue
        if current and bin_index[i] - bin_index[current[-1]] - 1 > bridge_gaps:
            close()
        current.append(i)
    close()
    return runs


def zscore_outliers(values, threshold: float = 2.0) -> np.ndarray:
    """Per-bin mask: True when any client's cell deviates more than ``threshold`` sigma
    from that client's column mean. Constant columns never produce outliers."""
    X = np.asarray(values, dtype=float)
    if X.size == 0:
        return np.zeros(X.shape[0], dtype=bool)
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    live = sigma > 0
    z = np.zeros_like(X)
    z[:, live] = (X[:, live] - mu[live]) / sigma[live]
    return (np.abs(z) > threshold).any(axis=1)


def class_for_correlation(correlation: float) -> str:
    """A: (0.75, 1], B: (0.5, 0.75], C: (0.25, 0.5], D: [0, 0.25]."""
    if correlation > 0.75:
        return "A"
    if correlation > 0.5:
        return "B"
    if correlation > 0.25:
        return "C"
    return "D"


def event_correlation(outlier_bins, z_mask) -> float:
    bins = list(outlier_bins)
    if not bins:
        return 0.0
    z_mask = np.asarray(z_mask, dtype=bool)
    return float(z_mask[bins].sum()) / len(bins)


def classify_event(event: EventRun, flags, z_mask) -> str:
    """Confidence class from the share of the event's RPCA-outlier bins that are also Z-outliers."""
    flags = np.asarray(flags, dtype=bool)
    bins = [b for b in event.outlier_bins if not flags[b]]
    return class_for_correlation(event_correlation(bins, z_mask))


def best_class(classes) -> str:
    return min(classes, key=CLASSES.index)
