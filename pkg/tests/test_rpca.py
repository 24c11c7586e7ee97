import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2
from sklearn.covariance import MinCovDet

from ntpevents.detect import DegenerateMatrixError, RpcaFailure, RpcaParams, rpca_flags, select_top_k
from ntpevents.detect.mcd import ScatterError, consistency_factor, fast_mcd, h_alpha
from ntpevents.detect.rpca import epca, od_cutoff, robust_scale, spatial_median


def pct_oracle(X, threshold=5.0):
    Z = (X - X.mean(0)) / X.std(0, ddof=1)
    s = np.linalg.svd(Z - Z.mean(0), compute_uv=False) ** 2  # eigenvalues via SVD, not eigh
    return max(1, int((100 * s / s.sum() > threshold).sum()))


def test_top_k_examples(rng):
    col = rng.normal(size=200)
    assert select_top_k(np.column_stack([col, col])) == 1
    X = rng.normal(size=(5000, 2))
    assert select_top_k(X) == 2 == pct_oracle(X)
    with pytest.raises(DegenerateMatrixError):
        select_top_k(np.ones((10, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 8), st.integers(10, 200))
def test_top_k_matches_svd_oracle(seed, n, m):
    r = np.random.default_rng(seed)
    X = r.normal(size=(m, n)) @ r.normal(size=(n, n)) * r.uniform(0.1, 10, n)
    assert select_top_k(X) == pct_oracle(X)


def test_mcd_consistency_constants():
    # h = floor((m+p+1)/2) at alpha=0.5; full sample at alpha=1
    assert h_alpha(100, 3, 0.5) == 52 and h_alpha(100, 3, 1.0) == 100
    # consistency factor for p=1 equals the truncated-normal variance correction
    from scipy.stats import norm
    q = norm.ppf(0.875)
    trunc_var = 1 - 2 * q * norm.pdf(q) / 0.75
    assert consistency_factor(1, 0.75) == pytest.approx(1 / trunc_var, rel=1e-10)


def test_mcd_agrees_with_sklearn_on_contaminated_data(rng):
    X = rng.multivariate_normal([0, 0, 0], [[1, .5, 0], [.5, 1, .2], [0, .2, 1]], size=400)
    X[:40] += 8
    ours = fast_mcd(X, 0.75, rng=np.random.default_rng(1))
    ref = MinCovDet(support_fraction=0.75, random_state=0).fit(X)
    assert not ours.support[:40].any()
    np.testing.assert_allclose(ours.location, ref.location_, atol=0.1)
    np.testing.assert_allclose(ours.covariance, ref.covariance_, atol=0.2)
    assert (ours.support == ref.support_).mean() > 0.97


def test_mcd_exact_fit_raises():
    X = np.column_stack([np.arange(50.0), 2 * np.arange(50.0)])
    with pytest.raises(ScatterError):
        fast_mcd(X)


def test_spatial_median_oracle(rng):
    from scipy.optimize import minimize
    Z = rng.normal(size=(60, 3)) + [1, 2, 3]
    ref = minimize(lambda y: np.sqrt(((Z - y) ** 2).sum(1)).sum(), Z.mean(0), method="Nelder-Mead",
                   options=dict(xatol=1e-10, fatol=1e-12, maxiter=20000)).x
    np.testing.assert_allclose(spatial_median(Z), ref, atol=1e-5)


def test_od_cutoff_formula():
    od = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    t = od ** (2 / 3)
    med = np.median(t)
    mad = 1.4826 * np.median(np.abs(t - med))
    assert od_cutoff(od, 0.975) == pytest.approx((med + mad * 1.959963984540054) ** 1.5)


def test_window_flagged_and_rest_clean(rng):
    X = rng.normal(0.03, 0.0005, size=(300, 5))
    X[120:126] *= 4
    res = rpca_flags(X, select_top_k(X), rng=np.random.default_rng(0))
    assert res.method == "rce"
    assert not res.flags[120:126].any()
    assert res.flags[np.r_[0:120, 126:300]].mean() > 0.95
    assert res.sd_cutoff == pytest.approx(np.sqrt(chi2.ppf(0.975, res.k)))


def test_false_flag_rate_pure_noise():
    rates = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        X = r.normal(size=(1000, 4))
        rates.append(1 - rpca_flags(X, select_top_k(X), rng=r).flags.mean())
    assert np.mean(rates) <= 0.035


def test_singular_scatter_falls_back_to_epca(rng):
    # 80% of rows identical: any h-subset has zero scatter
    X = np.tile([0.02, 0.03, 0.04], (100, 1))
    X[:20] += rng.normal(0, 0.001, size=(20, 3))
    res = rpca_flags(X, 1, rng=rng)
    assert res.method == "epca" and res.rce_error
    assert res.flags.shape == (100,)


def test_no_fallback_raises(rng):
    X = np.tile([0.02, 0.03, 0.04], (100, 1))
    X[:20] += rng.normal(0, 0.001, size=(20, 3))
    with pytest.raises(RpcaFailure):
        rpca_flags(X, 1, RpcaParams(epca_fallback=False), rng)


def test_epca_on_clean_data_close_to_classical(rng):
    Z = robust_scale(rng.normal(size=(2000, 3)))
    center, vecs, vals = epca(Z, 3)
    np.testing.assert_allclose(center, 0, atol=0.1)
    np.testing.assert_allclose(vals, 1, atol=0.15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.25, 2.0, 1024.0, 3.7, 1e-3]))
def test_scale_invariance(seed, c):
    r = np.random.default_rng(seed)
    X = r.gamma(4.0, 0.01, size=(150, 4))
    X[50:55] *= 4
    k = select_top_k(X)
    assert select_top_k(c * X) == k
    a = rpca_flags(X, k, rng=np.random.default_rng(seed))
    b = rpca_flags(c * X, k, rng=np.random.default_rng(seed))
    np.testing.assert_array_equal(a.flags, b.flags)


def test_deterministic_given_rng():
    X = np.random.default_rng(3).normal(size=(200, 3))
    a = rpca_flags(X, 2, rng=np.random.default_rng(9))
    b = rpca_flags(X, 2, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.flags, b.flags)
    np.testing.assert_array_equal(a.score_distance, b.score_distance)
