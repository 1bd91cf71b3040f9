"""Pure-numpy implementations of the hot kernels.

Mirrors the signatures of the compiled extension `_kernels`; selected at
import time by `voxelselect._core` when the extension is unavailable (or when
VOXELSELECT_PURE_PYTHON=1).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

LOG2PI = float(np.log(2 * np.pi))


def block_stats(y, s2, tgt, eta_vox, sig2_vox, d):
    """Per-voxel sufficient statistics of the displaced observation blocks.

    For every observation (flattened arrays y, s2, displaced target index
    tgt) let A = sig2_vox[tgt] + s2 and r = y - eta_vox[tgt].  Returns the
    per-voxel accumulations (count, sum 1/A, sum log A, sum r/A, sum r^2/A).
    """
    tgt = np.asarray(tgt)
    A = sig2_vox[tgt] + s2
    r = y - eta_vox[tgt]
    cnt = np.bincount(tgt, minlength=d).astype(np.float64)
    s_inv = np.bincount(tgt, weights=1.0 / A, minlength=d)
    s_log = np.bincount(tgt, weights=np.log(A), minlength=d)
    s_r = np.bincount(tgt, weights=r / A, minlength=d)
    s_r2 = np.bincount(tgt, weights=r * r / A, minlength=d)
    return cnt, s_inv, s_log, s_r, s_r2


def block_loglik_values(cnt, s_inv, s_log, s_r, s_r2, nu2_vox):
    """Per-voxel Gaussian block log-likelihoods from accumulated statistics.

    Implements the rank-one determinant/inverse identities: each nonempty
    voxel block has covariance nu2 * 11' + diag(A) whose log-density reduces
    to O(n_k) sums.  Voxels with nu2 = 0 degenerate to independent Gaussians.
    """
    nu2_vox = np.broadcast_to(np.asarray(nu2_vox, dtype=np.float64), cnt.shape)
    ll = -0.5 * (cnt * LOG2PI + s_log + np.log1p(nu2_vox * s_inv))
    quad = s_r2.copy()
    pos = nu2_vox > 0
    denom = np.empty_like(quad)
    denom[pos] = 1.0 / nu2_vox[pos] + s_inv[pos]
    quad[pos] -= s_r[pos] ** 2 / denom[pos]
    ll -= 0.5 * quad
    return np.where(cnt > 0, ll, 0.0)


def gauss_abs_transform(absy, sigma):
    """X = -log(1 - F_|eps|(|y|)) for centered Gaussian eps with std sigma."""
    return -np.log(erfc(np.asarray(absy, dtype=np.float64) / (sigma * np.sqrt(2.0))))


def _eta_one(Xs, H):
    """eta for one suffix of transformed values (varying window, l-inf)."""
    m = Xs.shape[0]
    T = np.cumsum(Xs)
    j = np.arange(1, m + 1)
    ET = j * (1.0 + H[m] - H[j])
    Q = ET / m * T[-1]
    return float(np.max(np.abs(T - Q)) / np.sqrt(m))


def eta_varying(X, ks, H):
    """Varying-window eta_k profile for transformed values X (known variance).

    X must be sorted non-increasing; H is the harmonic-number table
    H[0..n] with H[0] = 0.  Returns eta at each k in ks.
    """
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(ks), dtype=np.float64)
    for idx, k in enumerate(ks):
        out[idx] = _eta_one(X[k:], H)
    return out


def eta_varying_unknown(absy, sigmas, ks, H):
    """Varying-window eta_k with the transform recomputed at sigma_k per k.

    absy must be sorted non-increasing; sigmas[i] is the plug-in noise std
    for candidate ks[i] (mean-square over the n-k smallest observations).
    """
    absy = np.asarray(absy, dtype=np.float64)
    out = np.empty(len(ks), dtype=np.float64)
    sqrt2 = np.sqrt(2.0)
    for idx, k in enumerate(ks):
        Xs = -np.log(erfc(absy[k:] / (sigmas[idx] * sqrt2)))
        out[idx] = _eta_one(Xs, H)
    return out
