"""One-sample group inference with classical multiplicity control.

Voxelwise Student statistics on subject effect maps, Bonferroni and
Benjamini-Hochberg p-value adjustment, and permutation calibration of the
maximal statistic and of the maximal cluster size under subject-level
sign flips (the exchangeability device for a symmetric one-sample null).
These serve as reference procedures against the model-based selection in
the rest of the package.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .volume import VoxelGrid, mask_components


@dataclass(frozen=True)
class StatMap:
    """Per-voxel test statistics with their degrees of freedom.

    Voxels where the statistic is undefined (zero variance and zero mean)
    hold NaN; zero variance with a nonzero mean yields a +-inf sentinel.
    """

    grid: VoxelGrid
    values: np.ndarray
    df: int

    @property
    def defined(self):
        return ~np.isnan(self.values)


@dataclass
class MultipleTestResult:
    """Rejection set of a multiplicity-controlling procedure."""

    procedure: str
    alpha: float
    rejected: np.ndarray                  # flat voxel indices
    threshold: float = np.nan             # statistic/p cutoff actually applied
    critical_size: int | None = None      # clusters only
    clusters: list[dict] = field(default_factory=list)

    def clusters_csv(self):
        lines = ["id,size,peak_value,peak_coordinates"]
        for c in self.clusters:
            coords = " ".join(str(int(v)) for v in c["peak_coordinates"])
            lines.append(f"{c['id']},{c['size']},{c['peak_value']:.6g},{coords}")
        return "\n".join(lines) + "\n"


def _stack_effects(subjects):
    grid = subjects[0].effects.grid
    Y = np.stack([s.effects.values for s in subjects])
    return Y, grid


def _t_values(Y):
    """Student statistics per column: mean / (population std / sqrt(n-1))."""
    n = Y.shape[0]
    mean = Y.mean(axis=0)
    std = np.sqrt(((Y - mean) ** 2).mean(axis=0))
    t = np.full(Y.shape[1], np.nan)
    ok = std > 0
    t[ok] = mean[ok] / (std[ok] / np.sqrt(n - 1))
    degenerate = ~ok & (mean != 0)
    t[degenerate] = np.sign(mean[degenerate]) * np.inf
    return t


def t_map(subjects) -> StatMap:
    """One-sample Student statistic map over subject effect maps."""
    if len(subjects) < 2:
        raise ValueError("need at least two subjects")
    Y, grid = _stack_effects(subjects)
    return StatMap(grid, _t_values(Y), len(subjects) - 1)


def p_values(smap: StatMap, alternative="greater"):
    """Per-voxel Student p-values (NaN where the statistic is undefined)."""
    t = smap.values
    p = np.full_like(t, np.nan)
    ok = smap.defined
    if alternative == "greater":
        p[ok] = stats.t.sf(t[ok], smap.df)
    elif alternative == "two-sided":
        p[ok] = 2 * stats.t.sf(np.abs(t[ok]), smap.df)
    else:
        raise ValueError("alternative must be 'greater' or 'two-sided'")
    return p


def adjust_pvalues(p, method, alpha=0.05) -> MultipleTestResult:
    """Bonferroni or Benjamini-Hochberg selection from raw p-values.

    Undefined (NaN) entries never reject but still count toward the number
    of tests.  Bonferroni rejects p < alpha/d; BH rejects the k* smallest
    with k* = max{k : p_(k) <= k alpha / d}.
    """
    p = np.asarray(p, dtype=np.float64)
    finite = ~np.isnan(p)
    if np.any((p[finite] < 0) | (p[finite] > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    d = p.shape[0]
    if method == "bonferroni":
        cutoff = alpha / d
        rejected = np.flatnonzero(finite & (p < cutoff))
        return MultipleTestResult("bonferroni", alpha, rejected, cutoff)
    if method == "bh":
        order = np.argsort(np.where(finite, p, np.inf), kind="stable")
        sorted_p = p[order]
        ranks = np.arange(1, d + 1)
        ok = np.flatnonzero(finite[order] & (sorted_p <= ranks * alpha / d))
        if ok.size == 0:
            return MultipleTestResult("bh", alpha, np.array([], dtype=np.intp), 0.0)
        k_star = int(ok[-1]) + 1
        cutoff = float(sorted_p[k_star - 1])
        return MultipleTestResult("bh", alpha, np.sort(order[:k_star]), cutoff)
    raise ValueError("method must be 'bonferroni' or 'bh'")


def _sign_patterns(n, reps, seed, exhaustive):
    if exhaustive:
        return np.array(list(itertools.product((1.0, -1.0), repeat=n)))
    if reps < 100:
        raise ValueError("need at least 100 permutation replicates")
    rng = np.random.default_rng(seed)
    signs = rng.choice([1.0, -1.0], size=(reps, n))
    signs[0] = 1.0  # include the identity pattern for exact validity
    return signs


def permutation_maxT(subjects, alpha=0.05, reps=1000, seed=0,
                     exhaustive=False) -> MultipleTestResult:
    """Voxelwise selection calibrated by the maximal-statistic null.

    The null distribution of max_k T_k is sampled by i.i.d. subject-level
    sign flips of the effect maps; voxels with undefined statistics are
    excluded from the maximum.  Rejects T_k > empirical (1-alpha) quantile.
    """
    Y, grid = _stack_effects(subjects)
    n = Y.shape[0]
    signs = _sign_patterns(n, reps, seed, exhaustive)
    maxima = np.empty(signs.shape[0])
    for r, s in enumerate(signs):
        t = _t_values(s[:, None] * Y)
        finite = np.isfinite(t)
        maxima[r] = t[finite].max() if finite.any() else -np.inf
    finite = maxima[np.isfinite(maxima)]
    u = float(np.quantile(finite, 1 - alpha)) if finite.size == maxima.size \
        else (-np.inf if finite.size == 0 else float(np.quantile(maxima, 1 - alpha)))
    t_obs = _t_values(Y)
    with np.errstate(invalid="ignore"):
        rejected = np.flatnonzero(t_obs > u)
    return MultipleTestResult("maxT", alpha, rejected, u)


def cluster_size_test(subjects, forming_alpha=0.001, fwer_alpha=0.05,
                      reps=1000, seed=0, exhaustive=False) -> MultipleTestResult:
    """Cluster-size inference with a sign-flip calibrated critical size.

    Clusters are face-adjacent components of {T > u} where u is the
    Student quantile at the per-voxel forming level; the critical size N
    is the (1-fwer_alpha) quantile of the permuted maximal cluster size.
    Clusters strictly larger than N survive.
    """
    if not (0 < forming_alpha < 1 and 0 < fwer_alpha < 1):
        raise ValueError("levels must lie in (0, 1)")
    Y, grid = _stack_effects(subjects)
    n = Y.shape[0]
    u = float(stats.t.ppf(1 - forming_alpha, n - 1))
    signs = _sign_patterns(n, reps, seed, exhaustive)

    def max_cluster_size(t):
        with np.errstate(invalid="ignore"):
            comps = mask_components(grid, t > u)
        return max((len(c) for c in comps), default=0)

    sizes = np.array([max_cluster_size(_t_values(s[:, None] * Y))
                      for s in signs])
    N = int(np.quantile(sizes, 1 - fwer_alpha))

    t_obs = _t_values(Y)
    with np.errstate(invalid="ignore"):
        comps = mask_components(grid, t_obs > u)
    clusters, rejected = [], []
    for cid, vox in enumerate(c for c in comps if len(c) > N):
        peak = vox[np.argmax(t_obs[vox])]
        clusters.append({
            "id": cid,
            "size": len(vox),
            "peak_value": float(t_obs[peak]),
            "peak_coordinates": tuple(int(c) for c in grid.unravel(int(peak))[0]),
            "voxels": vox,
        })
        rejected.append(vox)
    rejected = (np.sort(np.concatenate(rejected)) if rejected
                else np.array([], dtype=np.intp))
    return MultipleTestResult("cluster-size", fwer_alpha, rejected, u,
                              critical_size=N, clusters=clusters)
