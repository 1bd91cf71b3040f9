import itertools

import numpy as np
import pytest
from scipy import stats

from voxelselect import _core
from voxelselect.randthresh import (
    OrderedSample,
    transform,
    cond_expectations,
    eta_profile,
    estimate_count,
    global_null_test,
    ggm_fit,
    threshold_stability,
    FitError,
    _harmonic_table,
)


def test_transform_zero():
    s = transform(np.zeros(5))
    assert np.all(s.X == 0.0)


def test_transform_quantile_value():
    # F_|eps|(1.959964) = 0.95 for a standard Gaussian
    s = transform(np.array([1.959964, 0.0, 0.0]))
    assert s.X[0] == pytest.approx(-np.log(0.05), abs=1e-4)


def test_transform_stable_ties():
    y = np.array([2.0, -2.0, 2.0, 1.0])
    s = transform(y)
    assert list(s.order[:3]) == [0, 1, 2]  # ties keep original order


def test_transform_rejects_nonfinite():
    with pytest.raises(ValueError):
        transform(np.array([1.0, np.inf]))


def test_transform_null_is_exponential(rng):
    # under the null, the transforms are an i.i.d. Exp(1) sample (sorted)
    s = transform(rng.standard_normal(5000))
    assert stats.kstest(s.X, "expon").pvalue > 0.01


def test_cond_expectation_values():
    # n=3, j=1: E T_1 = 1 + 1/2 + 1/3 = 11/6; ratio at the full window
    et, b = cond_expectations(3, 0, 1)
    assert et == pytest.approx(11 / 6)
    assert b == pytest.approx((11 / 6) / 3)  # E T_n = n
    # at T_n = n the conditional expectation equals the marginal one
    assert b * 3 == pytest.approx(et)


def test_cond_expectation_sums_order_stats():
    # E T_j equals the sum of the first j order-statistic expectations
    for n, k, j in ((10, 0, 4), (30, 7, 11), (12, 3, 9)):
        m = n - k
        H = _harmonic_table(m)
        ex = [H[m] - H[i - 1] for i in range(1, j + 1)]  # E X_(i), size m
        et, _ = cond_expectations(n, k, j)
        assert et == pytest.approx(sum(ex), rel=1e-12)


def _expectation_profile(m):
    H = _harmonic_table(m)
    j = np.arange(1, m + 1)
    ET = j * (1.0 + H[m] - H[j])
    return np.diff(ET, prepend=0.0)  # E X_(i), decreasing


def test_eta_zero_at_expectations():
    # a suffix placed exactly at its expectation profile scores zero
    n = 20
    for k in (0, 3, 7):
        X = np.zeros(n)
        X[:k] = 100.0 - np.arange(k)  # arbitrary large sorted head
        X[k:] = _expectation_profile(n - k)
        s = OrderedSample(np.sort(X)[::-1], np.arange(n), X, 1.0)
        ks, eta = eta_profile(s, ks=[k])
        assert eta[0] == pytest.approx(0.0, abs=1e-12)


def test_eta_fixed_window_hand_computed():
    # n=6, X = (3, 2, 1.5, 1, .7, .3), k=0, K=3, hand-run of the recipe:
    # H6 = 2.45, ET = (2.45, 3.9, 4.85), T = (3, 5, 6.5),
    # Q = ET * 6.5/4.85, max|T-Q| = 0.2835051546..., eta = that / sqrt(6)
    X = np.array([3.0, 2.0, 1.5, 1.0, 0.7, 0.3])
    s = OrderedSample(X.copy(), np.arange(6), X, 1.0)
    ks, eta = eta_profile(s, ks=[0], window="fixed", K=3)
    assert eta[0] == pytest.approx(0.28350515463917514 / np.sqrt(6), rel=1e-10)


def test_fixed_equals_varying_up_to_normalization(rng):
    # with K = n-k the centered sums coincide; normalizations differ by
    # sqrt(n) vs sqrt(n-k)
    n = 40
    s = transform(rng.standard_normal(n))
    for k in (0, 5, 12):
        _, ev = eta_profile(s, ks=[k], window="varying", kappa=1)
        _, ef = eta_profile(s, ks=[k], window="fixed", K=n - k)
        assert ef[0] * np.sqrt(n) == pytest.approx(ev[0] * np.sqrt(n - k))


def test_lp_norm_profile(rng):
    n = 30
    s = transform(rng.standard_normal(n))
    ks, eta = eta_profile(s, ks=[0, 2, 4], norm=2)
    assert np.all(eta >= 0) and np.all(np.isfinite(eta))
    X = _expectation_profile(n)
    s0 = OrderedSample(X.copy(), np.arange(n), X, 1.0)
    _, eta0 = eta_profile(s0, ks=[0], norm=1)
    assert eta0[0] == pytest.approx(0.0, abs=1e-12)


def _sparse_sample(rng, n, frac, lo, hi):
    y = rng.standard_normal(n)
    k = int(frac * n)
    signs = rng.choice([-1.0, 1.0], k)
    y[:k] += signs * rng.uniform(lo, hi, k)
    return y, np.arange(k)


def test_estimate_count_recovers_fraction(rng):
    n = 2000
    y, active = _sparse_sample(rng, n, 0.2, 4.0, 8.0)
    res = estimate_count(y)
    assert abs(res.k_hat / n - 0.2) < 0.05
    false_pos = np.setdiff1d(res.selected, active)
    assert len(false_pos) / (n - len(active)) < 0.01


def test_selected_is_top_k(rng):
    y, _ = _sparse_sample(rng, 500, 0.1, 4.0, 8.0)
    res = estimate_count(y, sigma=1.0)
    top = np.argsort(-np.abs(y), kind="stable")[: res.k_hat]
    assert np.array_equal(np.sort(res.selected), np.sort(top))
    assert np.all(np.abs(y[res.selected]) >= res.threshold - 1e-12)


def test_scale_equivariance_unknown_sigma(rng):
    y, _ = _sparse_sample(rng, 600, 0.1, 4.0, 8.0)
    r1 = estimate_count(y)
    r2 = estimate_count(3.0 * y)
    assert r1.k_hat == r2.k_hat
    assert np.array_equal(np.sort(r1.selected), np.sort(r2.selected))
    assert r2.sigma2[0] == pytest.approx(9 * r1.sigma2[0])


def test_kappa_invariance(rng):
    y, _ = _sparse_sample(rng, 800, 0.1, 5.0, 8.0)
    r1 = estimate_count(y, kappa=40)
    r2 = estimate_count(y, kappa=200)
    assert r1.k_hat == r2.k_hat


def test_auto_scan_matches_exhaustive(rng):
    y, _ = _sparse_sample(rng, 6000, 0.2, 4.0, 8.0)
    r_auto = estimate_count(y, scan="auto")
    r_full = estimate_count(y, scan="exhaustive")
    assert len(r_auto.ks) < len(r_full.ks)  # genuinely coarse
    assert r_auto.k_hat == r_full.k_hat


def test_estimate_count_validation():
    with pytest.raises(ValueError):
        estimate_count(np.zeros(5))
    with pytest.raises(ValueError):
        estimate_count(np.zeros(100), window="fixed")  # K required


def test_eta_csv_roundtrip(rng):
    res = estimate_count(rng.standard_normal(100), sigma=1.0)
    lines = res.eta_csv().strip().split("\n")
    assert lines[0] == "k,eta"
    assert len(lines) == len(res.ks) + 1


def test_global_null_level(rng):
    n = 300
    # calibrate once, then check the rejection rate on fresh null data
    _, d_alpha, _ = global_null_test(rng.standard_normal(n), alpha=0.05,
                                     calib_reps=4000, seed=5)
    H = _harmonic_table(n)
    zero = np.zeros(1, dtype=np.intp)
    rejections = 0
    trials = 400
    for _ in range(trials):
        X = np.ascontiguousarray(np.sort(rng.exponential(size=n))[::-1])
        rejections += _core.eta_varying(X, zero, H)[0] > d_alpha
    rate = rejections / trials
    assert abs(rate - 0.05) < 3 * np.sqrt(0.05 * 0.95 / trials)


def test_global_null_power(rng):
    n = 100
    for _ in range(10):
        y = rng.standard_normal(n)
        y[0] += 20.0
        D, d, reject = global_null_test(y, alpha=0.05, calib_reps=1500, seed=2)
        assert reject


def test_global_null_accepts_expectations():
    n = 50
    X = _expectation_profile(n)
    H = _harmonic_table(n)
    D = _core.eta_varying(X, np.zeros(1, dtype=np.intp), H)[0]
    assert D == pytest.approx(0.0, abs=1e-12)


def test_ggm_pure_null():
    for seed in range(10):
        y = np.random.default_rng(seed).standard_normal(2000)
        fit = ggm_fit(y)
        assert fit.weights[1] < 0.05
        # the Gamma class may claim a sliver of the upper tail, nothing more
        assert np.sum(y >= fit.threshold) <= 0.01 * len(y)


def test_ggm_separated_mixture(rng):
    n = 4000
    lab = rng.random(n) < 0.2
    y = np.where(lab, rng.gamma(4.0, 2.0, n), rng.standard_normal(n))
    fit = ggm_fit(y)
    assert fit.weights[1] == pytest.approx(0.2, abs=0.05)
    assert 1.0 < fit.threshold < 8.0
    assert fit.shape * fit.scale == pytest.approx(8.0, rel=0.15)


def test_ggm_validation(rng):
    with pytest.raises(ValueError):
        ggm_fit(rng.standard_normal(20))
    with pytest.raises(FitError):
        ggm_fit(-np.abs(rng.standard_normal(100)))


def test_stability_constant_statistic(rng):
    maps = rng.standard_normal((6, 10))
    mean, var = threshold_stability(maps, lambda m: 7.0, 3, permutations=50)
    assert mean == 7.0 and var == 0.0


def test_stability_mean_estimate(rng):
    maps = rng.normal(2.0, 1.0, (40, 25))
    mean, var = threshold_stability(maps, lambda m: float(m[0].mean()), 5,
                                    permutations=200, seed=1)
    se = 1.0 / np.sqrt(25 * 200)  # crude upper bound on the MC std error
    assert mean == pytest.approx(2.0, abs=3 * se * 5)


def test_stability_exhaustive_matches_enumeration(rng):
    maps = rng.standard_normal((4, 6))

    def stat(m):
        return float(m[0] @ m[-1])  # order-sensitive on purpose

    mean, var = threshold_stability(maps, stat, 2, exhaustive=True)
    vals = [stat(maps[list(p)[:2]])
            for p in itertools.permutations(range(4))]
    assert mean == pytest.approx(np.mean(vals))
    assert var == pytest.approx(np.var(vals))
