import itertools

import numpy as np
import pytest
from scipy import stats

from voxelselect.volume import VoxelGrid, ScalarMap, SubjectData
from voxelselect.baseline import (
    t_map,
    p_values,
    adjust_pvalues,
    permutation_maxT,
    cluster_size_test,
    _t_values,
)
from conftest import make_subjects


def _subjects(Y):
    grid = VoxelGrid((Y.shape[1],))
    S2 = np.ones_like(Y)
    return make_subjects(Y, S2, grid)


def test_t_value_example():
    Y = np.array([[1.0], [2.0], [3.0]])
    sm = t_map(_subjects(Y))
    assert sm.values[0] == pytest.approx(2 * np.sqrt(3))
    assert sm.df == 2


def test_t_zero_mean_symmetric():
    Y = np.array([[-1.0], [1.0], [-2.0], [2.0]])
    assert t_map(_subjects(Y)).values[0] == 0.0


def test_t_matches_onesample_oracle(rng):
    Y = rng.normal(0.3, 1.0, (9, 40))
    got = t_map(_subjects(Y)).values
    ref = stats.ttest_1samp(Y, 0.0, axis=0).statistic
    assert np.allclose(got, ref)
    # shifting all subjects by c moves only the numerator
    got_c = t_map(_subjects(Y + 1.7)).values
    ref_c = stats.ttest_1samp(Y + 1.7, 0.0, axis=0).statistic
    assert np.allclose(got_c, ref_c)


def test_t_degenerate_voxels():
    Y = np.array([[0.0, 2.0, -3.0], [0.0, 2.0, -3.0]])
    sm = t_map(_subjects(Y))
    assert np.isnan(sm.values[0])
    assert sm.values[1] == np.inf and sm.values[2] == -np.inf
    p = p_values(sm)
    assert np.isnan(p[0]) and p[1] == 0.0 and p[2] == 1.0


def test_t_requires_two_subjects():
    with pytest.raises(ValueError):
        t_map(_subjects(np.ones((1, 3))))


def test_bonferroni_example():
    res = adjust_pvalues(np.array([0.001, 0.04]), "bonferroni", 0.05)
    assert list(res.rejected) == [0]
    assert res.threshold == pytest.approx(0.025)


def test_bh_example():
    res = adjust_pvalues(np.array([0.01, 0.02, 0.9]), "bh", 0.05)
    assert list(res.rejected) == [0, 1]


def test_nothing_rejected_at_one():
    p = np.ones(5)
    assert adjust_pvalues(p, "bonferroni", 0.05).rejected.size == 0
    assert adjust_pvalues(p, "bh", 0.05).rejected.size == 0


def _bh_oracle(p, alpha):
    """Literal O(d^2) run of the step-up rule."""
    d = len(p)
    order = np.argsort(p, kind="stable")
    k_star = 0
    for k in range(1, d + 1):
        if p[order[k - 1]] <= k * alpha / d:
            k_star = k
    return set(order[:k_star].tolist())


def test_bh_vs_oracle_and_contains_bonferroni(rng):
    for _ in range(50):
        p = rng.random(rng.integers(1, 40))
        alpha = rng.uniform(0.01, 0.2)
        bh = set(adjust_pvalues(p, "bh", alpha).rejected.tolist())
        assert bh == _bh_oracle(p, alpha)
        bonf = set(adjust_pvalues(p, "bonferroni", alpha).rejected.tolist())
        assert bonf <= bh


def test_maxt_all_zero_data():
    res = permutation_maxT(_subjects(np.zeros((4, 6))), exhaustive=True)
    assert res.rejected.size == 0


def test_maxt_exhaustive_matches_enumeration(rng):
    Y = rng.normal(0.5, 1.0, (4, 8))
    res = permutation_maxT(_subjects(Y), alpha=0.2, exhaustive=True)
    maxima = []
    for signs in itertools.product((1.0, -1.0), repeat=4):
        t = _t_values(np.array(signs)[:, None] * Y)
        maxima.append(np.nanmax(t))
    u = np.quantile(maxima, 0.8)
    t_obs = _t_values(Y)
    assert np.array_equal(res.rejected, np.flatnonzero(t_obs > u))
    assert res.threshold == pytest.approx(u)


def test_maxt_fwer_level(rng):
    trials, hits = 400, 0
    for _ in range(trials):
        Y = rng.standard_normal((10, 20))
        res = permutation_maxT(_subjects(Y), alpha=0.05, reps=200,
                               seed=int(rng.integers(1 << 30)))
        hits += res.rejected.size > 0
    rate = hits / trials
    assert abs(rate - 0.05) < 3 * np.sqrt(0.05 * 0.95 / trials) + 0.01


def test_maxt_dominates_pointwise_quantile(rng):
    Y = rng.standard_normal((12, 30))
    res = permutation_maxT(_subjects(Y), alpha=0.05, reps=500, seed=3)
    assert res.threshold >= stats.t.ppf(0.95, 11) - 0.3  # MC slack


def test_maxt_seed_reproducible(rng):
    Y = rng.normal(0.4, 1.0, (8, 15))
    r1 = permutation_maxT(_subjects(Y), reps=300, seed=9)
    r2 = permutation_maxT(_subjects(Y), reps=300, seed=9)
    assert r1.threshold == r2.threshold
    assert np.array_equal(r1.rejected, r2.rejected)


def test_cluster_singleton_never_survives_positive_critical(rng):
    Y = rng.standard_normal((10, 25)) * 0.5
    Y[:, 12] += 5.0  # one isolated hot voxel
    res = cluster_size_test(_subjects(Y), forming_alpha=0.05, reps=200, seed=1)
    sizes = [c["size"] for c in res.clusters]
    if res.critical_size >= 1:
        assert 1 not in sizes
    assert all(s > res.critical_size for s in sizes)


def test_cluster_two_blob_merging(rng):
    # strong two-blob 2D phantom: a permissive forming level merges the
    # blobs, so the surviving cluster count cannot increase
    grid = VoxelGrid((12, 12))
    truth = np.zeros((12, 12))
    truth[3:6, 3:6] = 4.0
    truth[6:9, 7:10] = 4.0
    Y = truth.reshape(-1) + 0.8 * rng.standard_normal((14, 144))
    subs = make_subjects(Y, np.ones_like(Y), grid)
    strict = cluster_size_test(subs, forming_alpha=1e-4, reps=150, seed=2)
    loose = cluster_size_test(subs, forming_alpha=1e-2, reps=150, seed=2)
    assert len(loose.clusters) <= len(strict.clusters)
    assert len(strict.clusters) >= 1


def test_cluster_subject_order_invariance(rng):
    Y = rng.normal(0.8, 1.0, (5, 36))
    grid = VoxelGrid((6, 6))
    subs = make_subjects(Y, np.ones_like(Y), grid)
    perm = rng.permutation(5)
    subs_p = [subs[i] for i in perm]
    r1 = cluster_size_test(subs, forming_alpha=0.05, exhaustive=True)
    r2 = cluster_size_test(subs_p, forming_alpha=0.05, exhaustive=True)
    assert r1.critical_size == r2.critical_size
    assert np.array_equal(r1.rejected, r2.rejected)


def test_cluster_csv(rng):
    Y = rng.normal(0.0, 1.0, (8, 16))
    Y[:, 4:8] += 3.0
    res = cluster_size_test(_subjects(Y), forming_alpha=0.01, reps=150, seed=0)
    csv = res.clusters_csv()
    assert csv.splitlines()[0] == "id,size,peak_value,peak_coordinates"
    assert len(csv.splitlines()) == len(res.clusters) + 1
