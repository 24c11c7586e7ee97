"""Reweighted minimum covariance determinant (MCD) scatter via concentration steps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import chi2


class ScatterError(RuntimeError):
    """Robust scatter could not be computed (singular or non-positive-definite)."""


@dataclass
class McdResult:
    location: np.ndarray
    covariance: np.ndarray
    raw_location: np.ndarray
    raw_covariance: np.ndarray
    support: np.ndarray  # boolean mask of the reweighting set
    h: int


def h_alpha(m: int, p: int, alpha: float) -> int:
    n2 = (m + p + 1) // 2
    h = int(math.floor(2 * n2 - m + 2 * (m - n2) * alpha))
    return min(max(h, n2), m)


def consistency_factor(p: int, alpha: float) -> float:
    """Scale making an alpha-trimmed normal covariance consistent."""
    if alpha >= 1:
        return 1.0
    return alpha / chi2.cdf(chi2.ppf(alpha, p), p + 2)


def _fit(X: np.ndarray, idx: np.ndarray, cond_limit: float):
    sub = X[idx]
    mu = sub.mean(axis=0)
    cov = np.cov(sub, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    diag = np.diag(chol)
    if diag.min() <= 0 or (diag.max() / diag.min()) ** 2 > cond_limit:
        return None
    return mu, cov, chol, 2.0 * np.log(diag).sum()


def _mahalanobis2(X: np.ndarray, mu: np.ndarray, chol: np.ndarray) -> np.ndarray:
    z = linalg.solve_triangular(chol, (X - mu).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", z, z)


def _cstep(X, idx, h, cond_limit, steps):
    fit = _fit(X, idx, cond_limit)
    if fit is None:
        return None
    for _ in range(steps):
        d2 = _mahalanobis2(X, fit[0], fit[2])
        new = np.sort(np.argpartition(d2, h - 1)[:h])
        if np.array_equal(new, idx):
            break
        nxt = _fit(X, new, cond_limit)
        if nxt is None:
            return None
        converged = nxt[3] >= fit[3] - 1e-12
        idx, fit = new, nxt
        if converged:
            break
    return idx, fit


def fast_mcd(
    X: np.ndarray,
    support_fraction: float = 0.75,
    rng: np.random.Generator | None = None,
    n_random_starts: int = 10,
    keep_best: int = 3,
    cutoff_quantile: float = 0.975,
    cond_limit: float = 1e12,
) -> McdResult:
    """Reweighted MCD location/scatter.

    Starts: the h rows closest to the coordinatewise median (in MAD units),
    the h rows closest in plain Euclidean distance to it, and
    ``n_random_starts`` random (p+1)-subsets. Each start gets two
    concentration steps; the ``keep_best`` lowest determinants are iterated
    to convergence. Raises :class:`ScatterError` on an exact fit or an
    ill-conditioned scatter.
    """
    X = np.asarray(X, dtype=float)
    m, p = X.shape
    if m <= p:
        raise ScatterError(f"need more rows than columns ({m} <= {p})")
    rng = rng if rng is not None else np.random.default_rng(0)
    h = h_alpha(m, p, support_fraction)

    med = np.median(X, axis=0)
    mad = np.median(np.abs(X - med), axis=0)
    mad[mad == 0] = 1.0
    starts = [
        np.sort(np.argsort(((X - med) / mad) ** 2 @ np.ones(p), kind="stable")[:h]),
        np.sort(np.argsort(((X - med) ** 2).sum(axis=1), kind="stable")[:h]),
    ]
    for _ in range(n_random_starts):
        sub = rng.choice(m, size=p + 1, replace=False)
        fit = _fit(X, sub, cond_limit)
        while fit is None and len(sub) < h:
            rest = np.setdiff1d(np.arange(m), sub)
            sub = np.append(sub, rng.choice(rest))
            fit = _fit(X, sub, cond_limit)
        if fit is None:
            continue
        d2 = _mahalanobis2(X, fit[0], fit[2])
        starts.append(np.sort(np.argpartition(d2, h - 1)[:h]))

    trials = []
    for idx in starts:
        res = _cstep(X, idx, h, cond_limit, steps=2)
        if res is not None:
            trials.append(res)
    if not trials:
        raise ScatterError("every h-subset has singular scatter")
    trials.sort(key=lambda r: r[1][3])
    best = None
    for idx, _ in trials[:keep_best]:
        res = _cstep(X, idx, h, cond_limit, steps=100)
        if res is not None and (best is None or res[1][3] < best[1][3]):
            best = res
    if best is None:
        raise ScatterError("concentration steps hit a singular subset")

    _, (raw_mu, raw_cov, _, _) = best
    raw_cov = raw_cov * consistency_factor(p, h / m)
    raw_chol = np.linalg.cholesky(raw_cov)
    d2 = _mahalanobis2(X, raw_mu, raw_chol)
    support = d2 <= chi2.ppf(cutoff_quantile, p)
    fit = _fit(X, np.flatnonzero(support), cond_limit)
    if fit is None:
        raise ScatterError("reweighted scatter is singular")
    mu, cov = fit[0], fit[1] * consistency_factor(p, cutoff_quantile)
    return McdResult(mu, cov, raw_mu, raw_cov, support, h)
