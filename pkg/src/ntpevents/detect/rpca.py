"""Robust PCA outlier flagging: MCD-based robust covariance with a spherical PCA fallback."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, norm

from .mcd import ScatterError, fast_mcd

MAD_SCALE = 1.4826


class DegenerateMatrixError(ValueError):
    pass


class RpcaFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RpcaParams:
    coverage: float = 0.75
    cutoff_quantile: float = 0.975
    variance_threshold: float = 5.0  # percent
    n_random_starts: int = 10
    epca_fallback: bool = True


@dataclass
class RpcaResult:
    flags: np.ndarray  # True = regular row, False = outlier
    method: str  # "rce" or "epca"
    k: int
    score_distance: np.ndarray
    orthogonal_distance: np.ndarray
    sd_cutoff: float
    od_cutoff: float
    rce_error: str | None = None


def _mad(x: np.ndarray, axis=0) -> np.ndarray:
    med = np.median(x, axis=axis, keepdims=True)
    return MAD_SCALE * np.median(np.abs(x - med), axis=axis)


def select_top_k(values: np.ndarray, threshold: float = 5.0) -> int:
    """Number of principal components explaining more than ``threshold`` percent of variance.

    Eigenvalues come from the covariance of the column-standardized matrix;
    constant columns contribute nothing. At least one component is kept.
    """
    X = np.asarray(values, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateMatrixError("need at least two rows")
    sd = X.std(axis=0, ddof=1)
    live = sd > 1e-12 * np.maximum(np.abs(X).max(axis=0), 1e-300)
    if not live.any():
        raise DegenerateMatrixError("zero total variance")
    Z = (X[:, live] - X[:, live].mean(axis=0)) / sd[live]
    eig = np.clip(np.linalg.eigvalsh(np.cov(Z, rowvar=False).reshape(Z.shape[1], Z.shape[1])), 0, None)
    total = eig.sum()
    if total <= 0:
        raise DegenerateMatrixError("zero total variance")
    return max(1, int((100.0 * eig / total > threshold).sum()))


def robust_scale(values: np.ndarray) -> np.ndarray:
    """Center columns by median and divide by MAD (std when MAD is zero)."""
    X = np.asarray(values, dtype=float)
    center = np.median(X, axis=0)
    scale = _mad(X)
    zero = scale <= 0
    if zero.any():
        scale[zero] = X[:, zero].std(axis=0)
    scale[scale <= 0] = 1.0
    return (X - center) / scale


def od_cutoff(od: np.ndarray, quantile: float) -> float:
    """Orthogonal distance cutoff from the normal approximation of od**(2/3)."""
    t = od ** (2.0 / 3.0)
    return float((np.median(t) + _mad(t) * norm.ppf(quantile)) ** 1.5)


def _distances(Z: np.ndarray, center: np.ndarray, vectors: np.ndarray, eigvals: np.ndarray):
    D = Z - center
    scores = D @ vectors
    sd = np.sqrt((scores**2 / eigvals).sum(axis=1))
    resid = D - scores @ vectors.T
    od = np.sqrt((resid**2).sum(axis=1))
    return sd, od


def _flag(sd, od, k, p, quantile, scale):
    sd_cut = float(np.sqrt(chi2.ppf(quantile, k)))
    if k >= p or od.max(initial=0.0) <= 1e-9 * scale:
        od = np.zeros_like(od)
        od_cut = 0.0
    else:
        od_cut = od_cutoff(od, quantile)
    return (sd <= sd_cut) & (od <= od_cut), sd, od, sd_cut, od_cut


def _top(vals: np.ndarray, vecs: np.ndarray, k: int):
    order = np.argsort(vals)[::-1][:k]
    return vals[order], vecs[:, order]


def rce(Z: np.ndarray, k: int, params: RpcaParams, rng: np.random.Generator):
    mcd = fast_mcd(Z, params.coverage, rng=rng, n_random_starts=params.n_random_starts,
                   cutoff_quantile=params.cutoff_quantile)
    vals, vecs = np.linalg.eigh(mcd.covariance)
    if vals.min() <= 1e-10 * max(vals.max(), 1e-300):
        raise ScatterError("robust scatter is not positive definite")
    vals, vecs = _top(vals, vecs, k)
    return mcd.location, vecs, vals


def spatial_median(Z: np.ndarray, iters: int = 200, tol: float = 1e-9) -> np.ndarray:
    """L1 median by Weiszfeld iteration."""
    y = np.median(Z, axis=0)
    for _ in range(iters):
        d = np.sqrt(((Z - y) ** 2).sum(axis=1))
        near = d < 1e-12
        if near.all():
            return y
        w = 1.0 / d[~near]
        nxt = (Z[~near] * w[:, None]).sum(axis=0) / w.sum()
        if near.any():
            # Vardi-Zhang correction when the iterate sits on a data point
            r = np.linalg.norm((Z[~near] - y).T @ w)
            frac = min(1.0, near.sum() / r) if r > 0 else 1.0
            nxt = (1 - frac) * nxt + frac * y
        if np.linalg.norm(nxt - y) <= tol * (1 + np.linalg.norm(y)):
            return nxt
        y = nxt
    return y


def epca(Z: np.ndarray, k: int):
    """Spherical PCA: L1-median center, project rows to the unit sphere, classical PCA."""
    center = spatial_median(Z)
    D = Z - center
    norms = np.sqrt((D**2).sum(axis=1))
    S = np.divide(D, norms[:, None], out=np.zeros_like(D), where=norms[:, None] > 0)
    p = Z.shape[1]
    vals, vecs = np.linalg.eigh(np.cov(S, rowvar=False).reshape(p, p))
    _, vecs = _top(vals, vecs, k)
    scores = D @ vecs
    spread = _mad(scores) ** 2
    weak = spread <= 0
    if weak.any():
        spread[weak] = scores[:, weak].var(axis=0)
    if (spread <= 0).any():
        raise RpcaFailure("spherical PCA found a zero-spread component")
    return center, vecs, spread


def rpca_flags(
    values: np.ndarray,
    k: int,
    params: RpcaParams = RpcaParams(),
    rng: np.random.Generator | None = None,
) -> RpcaResult:
    """Flag rows of a filled cluster matrix; ``False`` marks an anomalous time bin.

    Columns are robustly scaled first. A row is regular when its score
    distance is within sqrt(chi2(quantile, k)) and its orthogonal distance
    within the od**(2/3) normal cutoff. The robust covariance path falls back
    to spherical PCA when the MCD scatter is singular or fails.
    """
    Z = robust_scale(values)
    m, p = Z.shape
    k = max(1, min(int(k), p))
    rng = rng if rng is not None else np.random.default_rng(0)
    scale = float(np.abs(Z).max(initial=1.0))
    rce_error = None
    try:
        center, vecs, vals = rce(Z, k, params, rng)
        method = "rce"
    except (ScatterError, np.linalg.LinAlgError, FloatingPointError) as exc:
        if not params.epca_fallback:
            raise RpcaFailure(f"robust covariance failed: {exc}") from exc
        rce_error = str(exc)
        try:
            center, vecs, vals = epca(Z, k)
        except (np.linalg.LinAlgError, FloatingPointError) as exc2:
            raise RpcaFailure(f"both estimators failed: {exc}; {exc2}") from exc2
        method = "epca"
    sd, od = _distances(Z, center, vecs, vals)
    flags, sd, od, sd_cut, od_cut = _flag(sd, od, k, p, params.cutoff_quantile, scale)
    return RpcaResult(flags, method, k, sd, od, sd_cut, od_cut, rce_error)
