"""Random-threshold selection of nonzero means in large Gaussian samples.

Given n observations y_i = mu_i + eps_i with sparse means and Gaussian
noise, the procedure sorts |y| decreasingly, maps the values through
X_(i) = -log(1 - F_|eps|(|y|_(i))) -- exact Exp(1) order statistics under
the null -- and scans candidate counts k, scoring each by the maximal
deviation of the centered partial sums of the remaining n-k values from
their conditional expectations.  The selected count minimizes that score;
the threshold is the k-th largest |y|.  Fixed and varying comparison
windows, unknown noise variance, an exact-level global null test, a
Gamma-Gaussian mixture comparator and permutation-based threshold
stability estimates are provided.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import _core


class FitError(RuntimeError):
    """Iterative fit failed to converge or produced invalid parameters."""


@dataclass(frozen=True)
class OrderedSample:
    """Sorted absolute observations and their exponential-scale transforms.

    abs_sorted is |y| in non-increasing order, order the permutation back
    to the original indices (stable: ties keep input order), X the
    transformed values, sigma the null standard deviation used.
    """

    abs_sorted: np.ndarray
    order: np.ndarray
    X: np.ndarray
    sigma: float

    @property
    def n(self):
        return self.abs_sorted.shape[0]


@dataclass
class ThresholdResult:
    """Outcome of a random-threshold scan."""

    k_hat: int
    threshold: float
    selected: np.ndarray           # original indices of the k_hat largest |y|
    ks: np.ndarray                 # candidate counts evaluated
    eta: np.ndarray                # score profile over ks
    window: str                    # "varying" | "fixed"
    kappa: int
    K: int | None = None           # fixed window width, if any
    norm: float = np.inf
    sigma2: np.ndarray | None = None  # plug-in variances per candidate k

    def eta_csv(self):
        lines = ["k,eta" + (",sigma2" if self.sigma2 is not None else "")]
        for i, k in enumerate(self.ks):
            row = f"{int(k)},{self.eta[i]:.10g}"
            if self.sigma2 is not None:
                row += f",{self.sigma2[i]:.10g}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def transform(y, sigma=1.0):
    """Sort |y| decreasingly and map through the null |eps| cdf.

    Returns an OrderedSample whose X values are distributed as ordered
    Exp(1) order statistics when every mean is zero.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("expected a 1-d sample")
    if not np.all(np.isfinite(y)):
        raise ValueError("sample contains non-finite values")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    absy = np.abs(y)
    order = np.argsort(-absy, kind="stable")
    abs_sorted = absy[order]
    X = _core.gauss_abs_transform(abs_sorted, float(sigma))
    return OrderedSample(abs_sorted, order, X, float(sigma))


def _harmonic_table(n):
    H = np.zeros(n + 1)
    H[1:] = np.cumsum(1.0 / np.arange(1, n + 1))
    return H


def cond_expectations(n, k, j, window=None):
    """Expected partial sum E T_{k,j} and its conditioning ratio.

    Among the n-k null-attributed values, T_{k,j} sums the j largest
    transforms; its expectation is j + j * sum_{l=j+1}^{n-k} 1/l.  The
    second return value b satisfies E(T_{k,j} | T_{k,W}) = b * T_{k,W}
    for the window width W (defaults to n-k).
    """
    m = n - k
    if not 1 <= j <= m:
        raise ValueError("need 1 <= j <= n - k")
    W = m if window is None else int(window)
    if not j <= W <= m:
        raise ValueError("window must cover j and at most n - k values")
    H = _harmonic_table(m)
    ET_j = j * (1.0 + H[m] - H[j])
    ET_W = W * (1.0 + H[m] - H[W])
    return ET_j, ET_j / ET_W


def _eta_generic(X, k, n, H, window, p):
    """Score at one candidate k for any window/norm combination."""
    m = n - k
    W = m if window is None else min(window, m)
    T = np.cumsum(X[k:k + W])
    j = np.arange(1, W + 1)
    ET = j * (1.0 + H[m] - H[j])
    Q = ET / ET[-1] * T[-1]
    dev = np.abs(T - Q)
    base = n if window is not None else m
    if p == np.inf:
        return float(dev.max() / np.sqrt(base))
    return float(base ** (-p / 2.0 - 1.0) * np.sum(dev ** p))


def eta_profile(sample, ks=None, window="varying", K=None, kappa=None,
                norm=np.inf):
    """Score profile eta_k over candidate counts.

    window="varying" compares each suffix against all n-k remaining
    values; window="fixed" uses the K largest of them and normalizes by
    sqrt(n).  norm is inf for the maximal deviation or a finite p >= 1
    for the power-sum variant.
    """
    n = sample.n
    if kappa is None:
        kappa = math.ceil(0.05 * n)
    if window == "fixed":
        if K is None:
            raise ValueError("fixed window requires K")
        k_max = n - K
    elif window == "varying":
        K = None
        k_max = n - kappa
    else:
        raise ValueError("window must be 'fixed' or 'varying'")
    if k_max < 0:
        raise ValueError("window infeasible for this sample size")
    if ks is None:
        ks = np.arange(k_max + 1)
    ks = np.asarray(ks, dtype=np.intp)
    if ks.size == 0 or ks.min() < 0 or ks.max() > k_max:
        raise ValueError("candidate counts outside the feasible range")
    H = _harmonic_table(n)
    if window == "varying" and norm == np.inf:
        eta = np.asarray(_core.eta_varying(sample.X, ks, H))
    else:
        eta = np.array([_eta_generic(sample.X, int(k), n, H, K, norm)
                        for k in ks])
    return ks, eta


def _scan_candidates(k_max, scan):
    """Candidate counts for a coarse pass ('auto') or the full range."""
    if scan == "exhaustive" or k_max <= 2048:
        return np.arange(k_max + 1), None
    step = max(1, (k_max + 1) // 512)
    coarse = np.arange(0, k_max + 1, step)
    if coarse[-1] != k_max:
        coarse = np.append(coarse, k_max)
    return coarse, step


def _refine(ks, eta, evaluate, k_max, step):
    """Evaluate every k around the best coarse minima; return full arrays."""
    order = np.argsort(eta, kind="stable")
    extra = []
    for idx in order[:3]:
        lo = max(0, int(ks[idx]) - 2 * step)
        hi = min(k_max, int(ks[idx]) + 2 * step)
        extra.append(np.arange(lo, hi + 1))
    fine = np.setdiff1d(np.concatenate(extra), ks)
    if fine.size:
        ks = np.concatenate([ks, fine])
        eta = np.concatenate([eta, evaluate(fine)])
        srt = np.argsort(ks)
        ks, eta = ks[srt], eta[srt]
    return ks, eta


def estimate_count(y, sigma=None, window="varying", K=None, kappa=None,
                   norm=np.inf, scan="auto"):
    """Select the number of nonzero means and the induced threshold.

    sigma=None activates the unknown-variance mode: for each candidate k
    the noise variance is re-estimated as the mean square of the n-k
    smallest observations and the transform recomputed.  scan="auto"
    uses a coarse pass followed by local refinement on large samples;
    scan="exhaustive" evaluates every candidate.  Ties break to the
    smallest k.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 10:
        raise ValueError("need at least 10 observations")
    if kappa is None:
        kappa = math.ceil(0.05 * n)
    unknown = sigma is None
    if window == "fixed":
        if K is None:
            raise ValueError("fixed window requires K")
        k_max = n - K
    else:
        k_max = n - kappa
    if unknown:
        k_max = min(k_max, n - max(kappa, 30))
    if k_max < 0:
        raise ValueError("no feasible candidate counts")

    sample = transform(y, 1.0 if unknown else sigma)
    absy = sample.abs_sorted
    H = _harmonic_table(n)
    # suffix mean squares: theta_k = mean(y_(i)^2, i > k)
    suffix_ms = np.cumsum(absy[::-1] ** 2)[::-1] / np.arange(n, 0, -1)

    def evaluate(ks):
        ks = np.asarray(ks, dtype=np.intp)
        if unknown:
            sig = np.sqrt(suffix_ms[ks])
            if window == "varying" and norm == np.inf:
                return np.asarray(_core.eta_varying_unknown(absy, sig, ks, H))
            out = np.empty(len(ks))
            for i, k in enumerate(ks):
                X = _core.gauss_abs_transform(absy, sig[i])
                out[i] = _eta_generic(X, int(k), n, H, K, norm)
            return out
        if window == "varying" and norm == np.inf:
            return np.asarray(_core.eta_varying(sample.X, ks, H))
        return np.array([_eta_generic(sample.X, int(k), n, H, K, norm)
                         for k in ks])

    ks, step = _scan_candidates(k_max, scan)
    eta = evaluate(ks)
    if step is not None:
        ks, eta = _refine(ks, eta, evaluate, k_max, step)

    k_hat = int(ks[np.argmin(eta)])  # argmin takes the first = smallest k
    threshold = float(absy[k_hat - 1]) if k_hat > 0 else np.inf
    return ThresholdResult(
        k_hat=k_hat,
        threshold=threshold,
        selected=sample.order[:k_hat].copy(),
        ks=ks,
        eta=eta,
        window=window,
        kappa=int(kappa),
        K=K,
        norm=norm,
        sigma2=suffix_ms[ks] if unknown else None,
    )


def global_null_test(y, sigma=1.0, alpha=0.05, calib_reps=10_000, seed=0):
    """Test whether every mean is zero.

    D_n is the varying-window score at k=0; its null distribution is
    parameter-free (the transforms are Exp(1) order statistics), so the
    critical value is calibrated once by seeded Monte-Carlo.  Returns
    (D_n, d_alpha, reject).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    sample = transform(y, sigma)
    H = _harmonic_table(n)
    zero = np.zeros(1, dtype=np.intp)
    D_n = float(_core.eta_varying(sample.X, zero, H)[0])
    rng = np.random.default_rng(seed)
    null = np.empty(calib_reps)
    for r in range(calib_reps):
        X = np.ascontiguousarray(np.sort(rng.exponential(size=n))[::-1])
        null[r] = _core.eta_varying(X, zero, H)[0]
    d_alpha = float(np.quantile(null, 1.0 - alpha))
    return D_n, d_alpha, bool(D_n > d_alpha)


@dataclass
class GGMFit:
    """Gamma-Gaussian mixture fit and the induced detection threshold."""

    weights: np.ndarray            # (gaussian, gamma[, negative gamma])
    mean: float
    var: float
    shape: float
    scale: float
    threshold: float = np.inf
    neg_shape: float | None = None
    neg_scale: float | None = None
    n_iter: int = 0
    loglik: float = np.nan

    def posterior_gamma(self, y):
        """Posterior probability of the (positive) Gamma class."""
        dens = self._densities(np.asarray(y, dtype=np.float64))
        total = sum(w * d for w, d in zip(self.weights, dens))
        with np.errstate(invalid="ignore"):
            post = np.where(total > 0, self.weights[1] * dens[1] / total, 0.0)
        return post

    def _densities(self, y):
        dens = [stats.norm.pdf(y, self.mean, np.sqrt(self.var)),
                _gamma_pdf(y, self.shape, self.scale)]
        if self.neg_shape is not None:
            dens.append(_gamma_pdf(-y, self.neg_shape, self.neg_scale))
        return dens


def _gamma_pdf(y, shape, scale):
    out = np.zeros_like(y, dtype=np.float64)
    pos = y > 0
    out[pos] = stats.gamma.pdf(y[pos], shape, scale=scale)
    return out


def _gamma_mle(y, r):
    """Weighted Gamma maximum likelihood on the positive support."""
    wsum = r.sum()
    if wsum <= 1e-10:
        return None
    mean = float(r @ y / wsum)
    mean_log = float(r @ np.log(y) / wsum)
    c = np.log(mean) - mean_log
    if c <= 1e-12:
        return None
    a = (3 - c + np.sqrt((c - 3) ** 2 + 24 * c)) / (12 * c)  # standard start
    for _ in range(50):
        f = np.log(a) - special.digamma(a) - c
        a_new = a - f / (1.0 / a - special.polygamma(1, a))
        if a_new <= 0:
            a_new = a / 2
        if abs(a_new - a) < 1e-12 * a:
            a = a_new
            break
        a = a_new
    return float(a), mean / float(a)


def ggm_fit(y, mirror=False, max_iter=1000, tol=1e-8, weight_floor=1e-8):
    """EM fit of a Gaussian null class plus a Gamma class on y > 0.

    mirror=True adds a negative-Gamma class on y < 0.  The threshold is
    the smallest positive sample value whose posterior probability of
    belonging to the Gamma class reaches 0.5 (inf when none does, e.g.
    when the Gamma weight collapses on null data).
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 50:
        raise ValueError("need at least 50 observations")
    if not np.all(np.isfinite(y)):
        raise ValueError("sample contains non-finite values")

    pos = y > 0
    if not pos.any():
        raise FitError("no positive observations to carry the Gamma class")
    hi = y >= np.quantile(y, 0.9)
    fit = GGMFit(
        weights=np.array([0.9, 0.1, 0.0] if mirror else [0.9, 0.1]),
        mean=float(np.median(y)),
        var=float(np.var(y[~hi])) or 1.0,
        shape=2.0,
        scale=max(float(y[hi].mean()), 1e-3) / 2.0,
    )
    if mirror:
        fit.weights = np.array([0.8, 0.1, 0.1])
        fit.neg_shape, fit.neg_scale = 2.0, fit.scale

    prev_ll = -np.inf
    for it in range(1, max_iter + 1):
        dens = fit._densities(y)
        joint = np.stack([w * d for w, d in zip(fit.weights, dens)])
        total = joint.sum(axis=0)
        if np.any(total <= 0) or not np.all(np.isfinite(total)):
            raise FitError("mixture density vanished during EM")
        resp = joint / total
        ll = float(np.log(total).sum())

        w = resp.sum(axis=1) / n
        w = np.maximum(w, weight_floor)
        w /= w.sum()
        r0 = resp[0]
        mean = float(r0 @ y / r0.sum())
        var = float(r0 @ (y - mean) ** 2 / r0.sum())
        var = max(var, 1e-12)
        g = _gamma_mle(y[pos], resp[1][pos])
        if g is not None:
            fit.shape, fit.scale = g
        if mirror:
            neg = y < 0
            gn = _gamma_mle(-y[neg], resp[2][neg]) if neg.any() else None
            if gn is not None:
                fit.neg_shape, fit.neg_scale = gn
        fit.weights, fit.mean, fit.var = w, mean, var
        fit.n_iter, fit.loglik = it, ll
        if abs(ll - prev_ll) < tol * (1 + abs(ll)):
            break
        prev_ll = ll
    else:
        raise FitError(f"EM did not converge in {max_iter} iterations")

    ypos = np.sort(y[pos])
    post = fit.posterior_gamma(ypos)
    above = np.flatnonzero(post >= 0.5)
    fit.threshold = float(ypos[above[0]]) if above.size else np.inf
    return fit


def threshold_stability(maps, group_stat, subgroup_size, permutations=100,
                        seed=0, exhaustive=False):
    """Mean and variance of a subgroup statistic under subject resampling.

    Draws random permutations of the subject axis, applies group_stat to
    the first subgroup_size permuted maps, and returns the empirical mean
    and variance -- unbiased for the statistic's sampling moments when
    subjects are i.i.d.  exhaustive=True enumerates all permutations.
    """
    maps = np.asarray(maps)
    N = maps.shape[0]
    if not 0 < subgroup_size < N:
        raise ValueError("subgroup size must lie in (0, subject count)")
    if exhaustive:
        perms = itertools.permutations(range(N))
        vals = np.array([group_stat(maps[list(p)[:subgroup_size]])
                         for p in perms])
    else:
        rng = np.random.default_rng(seed)
        vals = np.array([group_stat(maps[rng.permutation(N)[:subgroup_size]])
                         for _ in range(permutations)])
    return float(vals.mean()), float(vals.var())
