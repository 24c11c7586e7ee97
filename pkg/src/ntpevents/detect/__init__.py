from .detector import (
    ClusterDetection,
    DetectorParams,
    detect_cluster,
    detect_clusters,
    read_events,
    read_matrix_details,
    write_events,
    write_matrix_details,
)
from .events import (
    DetectedEvent,
    EventRun,
    class_for_correlation,
    classify_event,
    extract_events,
    zscore_outliers,
)
from .matrix import ClusterMatrix, ClusterSkipped, MatrixError, build_matrix
from .rpca import DegenerateMatrixError, RpcaFailure, RpcaParams, rpca_flags, select_top_k

__all__ = [
    "ClusterDetection",
    "ClusterMatrix",
    "ClusterSkipped",
    "DegenerateMatrixError",
    "DetectedEvent",
    "DetectorParams",
    "EventRun",
    "MatrixError",
    "RpcaFailure",
    "RpcaParams",
    "build_matrix",
    "class_for_correlation",
    "classify_event",
    "detect_cluster",
    "detect_clusters",
    "extract_events",
    "read_events",
    "read_matrix_details",
    "rpca_flags",
    "select_top_k",
    "write_events",
    "write_matrix_details",
    "zscore_outliers",
]
