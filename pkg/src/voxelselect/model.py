"""Hierarchical generative model for regional group signals.

Observation model per subject i and voxel l:

    y_{i,l} = x_{i,l} + eps_{i,l},          eps ~ N(0, s_{i,l}^2)
    x_{i,l} = mu_{phi_i(l)} + xi,           xi  ~ N(0, sigma_j^2)

with the template mu over the voxel grid, mu_k = eta_j + chi_k in region j,
chi ~ N(0, nu_j^2).  The displacement map phi_i comes from a Gaussian-spline
field with weights w_{i,b} ~ N(0, sigS2 * I).  Regional involvement gamma_j
gates the prior on eta_j: a point mass at 0 (gamma_j = 0) or
N(m, nu_j^2 / lambda) (gamma_j = 1); variances carry Inverse-Gamma(alpha,
beta) priors.

Marginally over (x, mu), the observations displaced to one voxel k form a
Gaussian block with mean eta_j * 1 and covariance nu_j^2 * 11' +
diag(sigma_j^2 + s^2); `block_loglik` evaluates it in O(n_k) through the
matrix-determinant and Sherman-Morrison rank-one identities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np
from scipy.special import gammaln

from . import _core
from .volume import VoxelGrid, ScalarMap, Parcellation, SubjectData
from .deform import DisplacementSet, interpolate_field, displaced_targets

__all__ = [
    "Hyperparams",
    "GroupParams",
    "Network",
    "LatentState",
    "log_prior",
    "block_loglik",
    "data_loglik_given_w",
    "sufficient_stats",
    "log_complete",
    "invgamma_logpdf",
    "normal_logpdf",
    "stack_subjects",
    "targets_for",
]

LOG2PI = float(np.log(2 * np.pi))


def invgamma_logpdf(z, a, b):
    """log density of Inverse-Gamma(shape a, scale b) at z > 0."""
    z = np.asarray(z, dtype=np.float64)
    return a * np.log(b) - gammaln(a) - (a + 1) * np.log(z) - b / z


def normal_logpdf(x, mean, var):
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * (LOG2PI + np.log(var) + (x - mean) ** 2 / var)


@dataclass(frozen=True)
class Hyperparams:
    """Prior hyperparameters (thesis defaults)."""

    alpha: float = 3.0
    beta: float = 20.0
    lam: float = 1e-3
    m: float = 0.0
    p: float = 0.5  # prior involvement probability, shared across regions

    def __post_init__(self):
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1 (finite prior mean)")
        if self.beta <= 0 or self.lam <= 0:
            raise ValueError("beta and lambda must be positive")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0,1)")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "Hyperparams":
        return cls(**json.loads(text))

    @classmethod
    def preset(cls, name: str) -> "Hyperparams":
        if name == "thesis-defaults":
            return cls()
        raise KeyError(f"unknown hyperparameter preset {name!r}")


@dataclass
class GroupParams:
    """Regional parameters theta = (eta, nu^2, sigma^2, sigS2)."""

    eta: np.ndarray
    nu2: np.ndarray
    sig2: np.ndarray
    sigS2: float = 0.0
    mass_univariate: bool = False  # per-voxel regions with degenerate nu2 = 0

    def __post_init__(self):
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=np.float64))
        self.nu2 = np.atleast_1d(np.asarray(self.nu2, dtype=np.float64))
        self.sig2 = np.atleast_1d(np.asarray(self.sig2, dtype=np.float64))
        if not (self.eta.shape == self.nu2.shape == self.sig2.shape):
            raise ValueError("eta, nu2, sig2 must have one value per region")
        low = np.any(self.nu2 < 0) if self.mass_univariate else np.any(self.nu2 <= 0)
        if low or np.any(self.sig2 <= 0):
            raise ValueError("nu2 and sig2 must be positive (nu2 = 0 only in mass-univariate mode)")
        if self.sigS2 < 0:
            raise ValueError("sigS2 must be nonnegative (0 = no spatial uncertainty)")

    @property
    def regions(self) -> int:
        return self.eta.shape[0]

    def copy(self) -> "GroupParams":
        return GroupParams(self.eta.copy(), self.nu2.copy(), self.sig2.copy(),
                           self.sigS2, self.mass_univariate)

    def to_json(self) -> str:
        return json.dumps(
            {
                "eta": self.eta.tolist(),
                "nu2": self.nu2.tolist(),
                "sig2": self.sig2.tolist(),
                "sigS2": self.sigS2,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GroupParams":
        payload = json.loads(text)
        return cls(
            np.asarray(payload["eta"]),
            np.asarray(payload["nu2"]),
            np.asarray(payload["sig2"]),
            float(payload["sigS2"]),
        )


@dataclass(frozen=True)
class Network:
    """Binary involvement indicators gamma, one per region."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma)).astype(np.int8)
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("gamma entries must be 0 or 1")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def __len__(self):
        return self.gamma.shape[0]


@dataclass
class LatentState:
    """Latent variables z = (x, mu, w) on one grid."""

    x: np.ndarray  # (n, d) subject effects
    mu: np.ndarray  # (d,) template
    w: DisplacementSet | None = None  # None in no-spatial-uncertainty mode

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[1] != self.mu.shape[0]:
            raise ValueError("x must be (subjects, voxels) matching mu")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.mu))):
            raise ValueError("latent state must be finite")


def stack_subjects(data: list[SubjectData]):
    """Stack a subject list into (Y, S2) arrays of shape (n, d) plus the grid."""
    grid = data[0].grid
    if any(s.grid != grid for s in data):
        raise ValueError("all subjects must share one grid")
    Y = np.stack([s.effects.values for s in data])
    S2 = np.stack([s.variances.values for s in data])
    return Y, S2, grid


def targets_for(w: DisplacementSet | None, grid: VoxelGrid, n: int,
                exact: bool = False) -> np.ndarray:
    """Displaced target indices phi_i(l) for every subject, shape (n, d)."""
    d = grid.size
    if w is None:
        return np.tile(np.arange(d, dtype=np.intp), (n, 1))
    coords = grid.coordinates()
    out = np.empty((n, d), dtype=np.intp)
    for i in range(n):
        u = interpolate_field(w, i, exact=exact)
        out[i] = displaced_targets(grid, coords, u)
    return out


def log_prior(theta: GroupParams, gamma: Network, h: Hyperparams) -> float:
    """Log prior density of (theta, gamma).

    Regional means carry a Dirac mass at 0 when gamma_j = 0 (contributing
    only the Bernoulli network term) and N(m, nu_j^2/lambda) otherwise;
    every variance carries an IG(alpha, beta) prior.  sigS2 contributes only
    when positive (no-spatial-uncertainty mode drops the parameter).
    """
    g = gamma.gamma
    if len(gamma) != theta.regions:
        raise ValueError("network length must match region count")
    off = g == 0
    if np.any(theta.eta[off] != 0):
        raise ValueError("inconsistent state: eta_j must be 0 where gamma_j = 0")
    total = float(np.sum(np.where(g == 1, np.log(h.p), np.log1p(-h.p))))
    on = ~off
    if np.any(on):
        total += float(
            np.sum(normal_logpdf(theta.eta[on], h.m, theta.nu2[on] / h.lam))
        )
    total += float(np.sum(invgamma_logpdf(theta.nu2, h.alpha, h.beta)))
    total += float(np.sum(invgamma_logpdf(theta.sig2, h.alpha, h.beta)))
    if theta.sigS2 > 0:
        total += float(invgamma_logpdf(theta.sigS2, h.alpha, h.beta))
    return total


def block_loglik(y_block, s2_block, theta_j) -> float:
    """Gaussian log-density of one displaced voxel block.

    y_block holds the observations displaced to one voxel, s2_block their
    first-level variances, and theta_j = (eta_j, nu2_j, sig2_j) the region
    parameters.  The covariance nu2 * 11' + diag(sig2 + s2) is never formed:
    the determinant lemma and the Sherman-Morrison identity reduce the
    density to sums over the block.
    """
    eta_j, nu2_j, sig2_j = (float(v) for v in theta_j)
    y = np.atleast_1d(np.asarray(y_block, dtype=np.float64))
    s2 = np.broadcast_to(np.asarray(s2_block, dtype=np.float64), y.shape)
    if y.size < 1:
        raise ValueError("block must contain at least one observation")
    A = sig2_j + s2
    if np.any(A <= 0):
        raise ValueError("total variance sig2 + s2 must be positive")
    r = y - eta_j
    s_inv = float(np.sum(1.0 / A))
    quad = float(np.sum(r * r / A))
    logdet = float(np.sum(np.log(A))) + np.log1p(nu2_j * s_inv)
    if nu2_j > 0:
        quad -= float(np.sum(r / A)) ** 2 / (1.0 / nu2_j + s_inv)
    return -0.5 * (y.size * LOG2PI + logdet + quad)


def _voxel_params(theta: GroupParams, parc: Parcellation):
    labels = parc.labels
    return theta.eta[labels], theta.nu2[labels], theta.sig2[labels]


def data_loglik_given_w(data: list[SubjectData], w: DisplacementSet | None,
                        theta: GroupParams, parc: Parcellation,
                        exact: bool = False) -> float:
    """Conditional log-likelihood log f(y | w, theta): sum of block densities.

    Observations are regrouped by their displaced voxel phi_i(l); each
    nonempty block contributes `block_loglik` under the parameters of the
    region containing the target voxel.  Empty blocks contribute 0.
    """
    Y, S2, grid = stack_subjects(data)
    n, d = Y.shape
    tgt = targets_for(w, grid, n, exact=exact)
    eta_vox, nu2_vox, sig2_vox = _voxel_params(theta, parc)
    stats = _core.block_stats(
        Y.reshape(-1), S2.reshape(-1), np.ascontiguousarray(tgt.reshape(-1)),
        eta_vox, sig2_vox, d,
    )
    return float(np.sum(_core.block_loglik_values(*stats, nu2_vox)))


def sufficient_stats(state: LatentState, gamma: Network, parc: Parcellation,
                     h: Hyperparams):
    """Complete-data sufficient statistics of the curved exponential family.

    Returns (S_S, S) with S_S = beta + 1/2 sum ||w_{i,b}||^2 and S an (N, 4)
    array whose row j is
      ( 1/2 sum_{l_k=j} n_k,
        1/2 sum_{l_k=j} sum_{phi_i(l)=k} (x_{i,l} - mu_k)^2,
        beta + 1/2 sum_{l_k=j} mu_k^2,
        gamma_j * sum_{l_k=j} mu_k ).
    """
    n, d = state.x.shape
    N = parc.region_count
    labels = parc.labels
    if state.w is not None:
        S_S = h.beta + 0.5 * float(np.sum(state.w.weights**2))
        grid = state.w.lattice.grid
    else:
        S_S = h.beta
        grid = parc.grid
    tgt = targets_for(state.w, grid, n)
    region_of_obs = labels[tgt.reshape(-1)]
    resid2 = (state.x.reshape(-1) - state.mu[tgt.reshape(-1)]) ** 2
    S = np.zeros((N, 4))
    S[:, 0] = 0.5 * np.bincount(region_of_obs, minlength=N)
    S[:, 1] = 0.5 * np.bincount(region_of_obs, weights=resid2, minlength=N)
    S[:, 2] = h.beta + 0.5 * np.bincount(labels, weights=state.mu**2, minlength=N)
    S[:, 3] = gamma.gamma * np.bincount(labels, weights=state.mu, minlength=N)
    return S_S, S


class BlockLikelihood:
    """Incrementally updated conditional likelihood log f(y | w, theta).

    Maintains the per-voxel block statistics and log-likelihoods for a fixed
    theta while observations move between voxels (as displacement proposals
    change phi_i).  `propose` prices a move without committing it; `apply`
    commits the returned update record.
    """

    def __init__(self, Y, S2, tgt, theta: GroupParams, parc: Parcellation):
        self.Y = np.ascontiguousarray(Y, dtype=np.float64)
        self.S2 = np.ascontiguousarray(S2, dtype=np.float64)
        self.tgt = np.ascontiguousarray(tgt, dtype=np.intp)
        self.d = parc.grid.size
        self.eta_vox, self.nu2_vox, self.sig2_vox = _voxel_params(theta, parc)
        stats = _core.block_stats(
            self.Y.reshape(-1), self.S2.reshape(-1),
            np.ascontiguousarray(self.tgt.reshape(-1)),
            self.eta_vox, self.sig2_vox, self.d,
        )
        self.cnt, self.s_inv, self.s_log, self.s_r, self.s_r2 = stats
        self.ll = _core.block_loglik_values(*stats, self.nu2_vox)
        self.total = float(np.sum(self.ll))

    def propose(self, subject: int, obs: np.ndarray, t_new: np.ndarray):
        """Price moving observations `obs` of one subject to voxels t_new.

        Returns (delta_loglik, update_record) where the record can be passed
        to `apply`; the tracker itself is unchanged.
        """
        t_old = self.tgt[subject, obs]
        moved = t_old != t_new
        if not np.any(moved):
            return 0.0, None
        obs = obs[moved]
        t0, t1 = t_old[moved], t_new[moved]
        y, s2 = self.Y[subject, obs], self.S2[subject, obs]
        vox = np.unique(np.concatenate([t0, t1]))
        nv = vox.shape[0]
        p0, p1 = np.searchsorted(vox, t0), np.searchsorted(vox, t1)
        cnt = self.cnt[vox] + np.bincount(p1, minlength=nv) - np.bincount(p0, minlength=nv)

        def _terms(t, s2_, y_):
            A = self.sig2_vox[t] + s2_
            r = y_ - self.eta_vox[t]
            return 1.0 / A, np.log(A), r / A, r * r / A

        i0, l0, r0, q0 = _terms(t0, s2, y)
        i1, l1, r1, q1 = _terms(t1, s2, y)
        s_inv = self.s_inv[vox] + np.bincount(p1, weights=i1, minlength=nv) \
            - np.bincount(p0, weights=i0, minlength=nv)
        s_log = self.s_log[vox] + np.bincount(p1, weights=l1, minlength=nv) \
            - np.bincount(p0, weights=l0, minlength=nv)
        s_r = self.s_r[vox] + np.bincount(p1, weights=r1, minlength=nv) \
            - np.bincount(p0, weights=r0, minlength=nv)
        s_r2 = self.s_r2[vox] + np.bincount(p1, weights=q1, minlength=nv) \
            - np.bincount(p0, weights=q0, minlength=nv)
        ll_new = _core.block_loglik_values(cnt, s_inv, s_log, s_r, s_r2, self.nu2_vox[vox])
        delta = float(np.sum(ll_new) - np.sum(self.ll[vox]))
        record = (subject, obs, t1, vox, cnt, s_inv, s_log, s_r, s_r2, ll_new, delta)
        return delta, record

    def apply(self, record) -> None:
        if record is None:
            return
        subject, obs, t1, vox, cnt, s_inv, s_log, s_r, s_r2, ll_new, delta = record
        self.tgt[subject, obs] = t1
        self.cnt[vox] = cnt
        self.s_inv[vox] = s_inv
        self.s_log[vox] = s_log
        self.s_r[vox] = s_r
        self.s_r2[vox] = s_r2
        self.total += delta
        self.ll[vox] = ll_new


def log_complete(data: list[SubjectData], state: LatentState, theta: GroupParams,
                 gamma: Network, parc: Parcellation, h: Hyperparams) -> float:
    """Complete-data log density log f(y, z, theta | gamma)."""
    Y, S2, grid = stack_subjects(data)
    n, d = Y.shape
    tgt = targets_for(state.w, grid, n)
    labels = parc.labels
    total = float(np.sum(normal_logpdf(Y, state.x, S2)))
    sig2_obs = theta.sig2[labels[tgt]]
    total += float(np.sum(normal_logpdf(state.x, state.mu[tgt], sig2_obs)))
    total += float(
        np.sum(normal_logpdf(state.mu, theta.eta[labels], theta.nu2[labels]))
    )
    if state.w is not None and theta.sigS2 > 0:
        total += float(np.sum(normal_logpdf(state.w.weights, 0.0, theta.sigS2)))
    total += log_prior(theta, gamma, h)
    return total
