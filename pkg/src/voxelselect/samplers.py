"""Posterior computation: Metropolis-within-Gibbs, MCMC-SAEM, simulated annealing.

The Gibbs sweep updates, in order, the blocks x, mu, (eta, nu^2) with eta
integrated out of the nu^2 draw, sigma^2, sigS2, and finally one
random-walk Metropolis proposal per elementary displacement w_{i,b}.  All
conditionals except the displacements are conjugate and sampled directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import Parcellation, SubjectData
from .deform import (
    ControlLattice,
    DisplacementSet,
    build_lattice,
    kernel_matrix,
    displaced_targets,
)
from .model import (
    GroupParams,
    Hyperparams,
    LatentState,
    Network,
    stack_subjects,
    sufficient_stats,
)

__all__ = [
    "ChainConfig",
    "ChainTrace",
    "SamplerError",
    "DegenerateStatsError",
    "gibbs_sweep",
    "run_chain",
    "saem_fit",
    "sa_displacements",
]


class SamplerError(RuntimeError):
    """Sampler failure (non-finite acceptance ratio, invalid state...)."""


class DegenerateStatsError(SamplerError):
    """SAEM M-step produced a non-positive variance or denominator."""


@dataclass
class ChainConfig:
    """Sampler settings shared by the Gibbs chain and SAEM.

    For SAEM, burn_in plays the role of K_0 (averaging weight 1) and
    samples the remaining K - K_0 iterations (weights 1/k).
    """

    burn_in: int = 100
    samples: int = 400
    rw_sigma: float = 1.0
    target_accept: float = 0.1
    seed: int | None = 0
    adapt_window: int = 50
    omega: float | None = None  # control-lattice kernel width; None = no-SU mode

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.rw_sigma <= 0:
            raise ValueError("rw_sigma must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0,1)")


@dataclass
class ChainTrace:
    """Recorded output of a chain run."""

    mu_mean: np.ndarray
    x_mean: np.ndarray
    theta_series: dict[str, np.ndarray]
    accept_rates: np.ndarray | None
    s_avg: tuple | None
    rw_sigma: float
    theta_mean: GroupParams | None = None

    def to_csv(self, path) -> None:
        """Per-iteration theta series (and acceptance summary) as CSV."""
        keys = sorted(self.theta_series)
        cols = []
        names = []
        for key in keys:
            arr = np.atleast_2d(np.asarray(self.theta_series[key]).T).T
            for c in range(arr.shape[1]):
                names.append(f"{key}_{c}" if arr.shape[1] > 1 else key)
                cols.append(arr[:, c])
        data = np.column_stack(cols)
        header = "iteration," + ",".join(names)
        rows = np.column_stack([np.arange(data.shape[0]), data])
        np.savetxt(path, rows, delimiter=",", header=header, comments="",
                   fmt="%.10g")


class _Sampler:
    """Shared machinery for the Gibbs chain, SAEM and annealing passes."""

    def __init__(self, data, parc: Parcellation, gamma: Network, h: Hyperparams,
                 cfg: ChainConfig, lattice: ControlLattice | None = None):
        self.Y, self.S2, self.grid = stack_subjects(data)
        self.n, self.d = self.Y.shape
        self.parc = parc
        self.labels = parc.labels.astype(np.intp)
        self.N = parc.region_count
        self.dj = np.bincount(self.labels, minlength=self.N).astype(np.float64)
        self.gamma = gamma.gamma.astype(np.float64)
        if len(gamma) != self.N:
            raise ValueError("network length must match region count")
        self.h = h
        if h.m != 0.0:
            raise NotImplementedError("samplers assume prior regional mean m = 0")
        self.cfg = cfg
        self.su = lattice is not None or cfg.omega is not None
        if self.su:
            self.lattice = lattice or build_lattice(self.grid, cfg.omega)
            self.K = kernel_matrix(self.lattice)  # (d, B)
            self.B = self.lattice.count
            self.rank = self.grid.rank
            self.coords = self.grid.coordinates()
            # voxels within kernel range of each control point
            self.affected = [np.flatnonzero(self.K[:, b] > 0.0) for b in range(self.B)]
        else:
            self.lattice = None
        self.rw_sigma = cfg.rw_sigma
        self._accept = None
        self._window = [0, 0]  # proposals, accepts in the current tuning window

    # -- state management ---------------------------------------------------

    def init_state(self, theta: GroupParams | None = None, rng=None):
        mu = self.Y.mean(axis=0)
        x = self.Y.copy()
        if theta is None:
            mu_sums = np.bincount(self.labels, weights=mu, minlength=self.N)
            eta = self.gamma * mu_sums / self.dj
            mu2 = np.bincount(self.labels, weights=mu**2, minlength=self.N)
            nu2 = np.maximum(mu2 / self.dj - (mu_sums / self.dj) ** 2, 0.5)
            sig2 = np.ones(self.N)
            sigS2 = self.h.beta / (self.h.alpha - 1) if self.su else 0.0
            theta = GroupParams(eta, nu2, sig2, sigS2)
        if self.su:
            # start displacements at unit scale: from w = 0 the first sigS2
            # update collapses toward beta/(alpha+1+rank*n*B/2) and the
            # tightened prior pins the slow-mixing w chain there, while a
            # draw at the full prior scale can start the chain at large
            # wrong deformations that short runs cannot undo
            rng = rng if rng is not None else np.random.default_rng(0)
            scale = min(theta.sigS2, 1.0)
            w = np.sqrt(scale) * rng.standard_normal(
                (self.n, self.B, self.rank))
            u = np.stack([self.K @ w[i] for i in range(self.n)])
            tgt = np.ascontiguousarray(
                displaced_targets(self.grid, self.coords[None, :, :], u),
                dtype=np.intp)
        else:
            w = u = None
            tgt = np.tile(np.arange(self.d, dtype=np.intp), (self.n, 1))
        state = {"x": x, "mu": mu, "w": w, "u": u, "tgt": tgt}
        self._accept = np.zeros((self.n, self.B, 2)) if self.su else None
        return state, theta.copy()

    def state_from_latent(self, latent: LatentState):
        state = {"x": latent.x.copy(), "mu": latent.mu.copy()}
        if latent.w is not None:
            ds = latent.w
            state["w"] = ds.weights.copy()
            u = np.stack([self.K @ ds.weights[i] for i in range(self.n)])
            state["u"] = u
            state["tgt"] = np.ascontiguousarray(
                displaced_targets(self.grid, self.coords[None, :, :], u), dtype=np.intp
            )
        else:
            state["w"] = state["u"] = None
            state["tgt"] = np.tile(np.arange(self.d, dtype=np.intp), (self.n, 1))
        self._accept = np.zeros((self.n, self.B, 2)) if self.su else None
        return state

    def latent_from_state(self, state) -> LatentState:
        w = None
        if state["w"] is not None:
            w = DisplacementSet(self.lattice, state["w"].copy())
        return LatentState(state["x"].copy(), state["mu"].copy(), w)

    # -- conjugate blocks ----------------------------------------------------

    def update_x(self, state, theta, rng):
        tgt = state["tgt"]
        sig2 = theta.sig2[self.labels[tgt]]
        s2 = self.S2
        tot = sig2 + s2
        mean = (sig2 * self.Y + s2 * state["mu"][tgt]) / tot
        var = sig2 * s2 / tot
        state["x"] = mean + np.sqrt(var) * rng.standard_normal(self.Y.shape)

    def update_mu(self, state, theta, rng):
        tgt = state["tgt"].reshape(-1)
        n_k = np.bincount(tgt, minlength=self.d)
        x_sum = np.bincount(tgt, weights=state["x"].reshape(-1), minlength=self.d)
        nu2 = theta.nu2[self.labels]
        sig2 = theta.sig2[self.labels]
        eta = theta.eta[self.labels]
        prec = 1.0 / nu2 + n_k / sig2
        var = 1.0 / prec
        mean = (eta / nu2 + x_sum / sig2) * var
        state["mu"] = mean + np.sqrt(var) * rng.standard_normal(self.d)

    def update_eta_nu2(self, state, theta, rng):
        mu = state["mu"]
        h = self.h
        mu_sum = np.bincount(self.labels, weights=mu, minlength=self.N)
        mu2_sum = np.bincount(self.labels, weights=mu**2, minlength=self.N)
        shape = h.alpha + self.dj / 2
        scale = h.beta + 0.5 * mu2_sum - self.gamma * mu_sum**2 / (2 * (h.lam + self.dj))
        theta.nu2 = scale / rng.gamma(shape, 1.0, size=self.N)
        mean = mu_sum / (h.lam + self.dj)
        std = np.sqrt(theta.nu2 / (h.lam + self.dj))
        theta.eta = self.gamma * (mean + std * rng.standard_normal(self.N))

    def update_sig2(self, state, theta, rng):
        tgt = state["tgt"].reshape(-1)
        region = self.labels[tgt]
        resid2 = (state["x"].reshape(-1) - state["mu"][tgt]) ** 2
        n_j = np.bincount(region, minlength=self.N)
        shape = self.h.alpha + 0.5 * n_j
        scale = self.h.beta + 0.5 * np.bincount(region, weights=resid2, minlength=self.N)
        theta.sig2 = scale / rng.gamma(shape, 1.0, size=self.N)

    def update_sigS2(self, state, theta, rng):
        w = state["w"]
        shape = self.h.alpha + self.rank * self.n * self.B / 2
        scale = self.h.beta + 0.5 * float(np.sum(w**2))
        theta.sigS2 = scale / rng.gamma(shape)

    # -- displacement block ----------------------------------------------------

    def _x_loglik_delta(self, state, theta, i, vox, t_new):
        """Change in log pi(x_i | mu, sigma^2, w_i) when voxels move targets."""
        t_old = state["tgt"][i, vox]
        moved = t_old != t_new
        if not np.any(moved):
            return 0.0, vox[moved], t_new[moved]
        x = state["x"][i, vox[moved]]
        mu = state["mu"]
        sig2 = theta.sig2
        t0, t1 = t_old[moved], t_new[moved]
        s0, s1 = sig2[self.labels[t0]], sig2[self.labels[t1]]
        ll0 = -0.5 * (np.log(s0) + (x - mu[t0]) ** 2 / s0)
        ll1 = -0.5 * (np.log(s1) + (x - mu[t1]) ** 2 / s1)
        return float(np.sum(ll1 - ll0)), vox[moved], t1

    def update_w(self, state, theta, rng, adapt: bool):
        """One MH random-walk proposal per (subject, control point)."""
        w = state["w"]
        log_unif = np.log(rng.random((self.n, self.B)))
        steps = self.rw_sigma * rng.standard_normal((self.n, self.B, self.rank))
        for i in range(self.n):
            for b in range(self.B):
                old = w[i, b]
                new = old + steps[i, b]
                prior_delta = (old @ old - new @ new) / (2 * theta.sigS2)
                vox = self.affected[b]
                du = np.outer(self.K[vox, b], new - old)
                u_new = state["u"][i, vox] + du
                t_new = displaced_targets(self.grid, self.coords[vox], u_new)
                lik_delta, moved_vox, moved_t = self._x_loglik_delta(
                    state, theta, i, vox, t_new
                )
                log_ratio = prior_delta + lik_delta
                if not np.isfinite(log_ratio):
                    raise SamplerError(
                        f"non-finite acceptance ratio at subject {i}, point {b}"
                    )
                self._accept[i, b, 0] += 1
                accepted = log_unif[i, b] < log_ratio
                if accepted:
                    w[i, b] = new
                    state["u"][i, vox] += du
                    state["tgt"][i, moved_vox] = moved_t
                    self._accept[i, b, 1] += 1
                if adapt:
                    self._window[0] += 1
                    self._window[1] += int(accepted)
                    if self._window[0] >= self.cfg.adapt_window:
                        rate = self._window[1] / self._window[0]
                        self.rw_sigma *= 1.1 if rate > self.cfg.target_accept else 0.9
                        self._window = [0, 0]

    # -- sweeps ---------------------------------------------------------------

    def sweep(self, state, theta, rng, adapt=False, update_theta=True):
        self.update_x(state, theta, rng)
        self.update_mu(state, theta, rng)
        spatial = self.su and state["w"] is not None
        if update_theta:
            self.update_eta_nu2(state, theta, rng)
            self.update_sig2(state, theta, rng)
            if spatial:
                self.update_sigS2(state, theta, rng)
        if spatial:
            self.update_w(state, theta, rng, adapt)

    def accept_rates(self):
        if self._accept is None:
            return None
        with np.errstate(invalid="ignore"):
            return np.where(
                self._accept[:, :, 0] > 0,
                self._accept[:, :, 1] / np.maximum(self._accept[:, :, 0], 1),
                0.0,
            )


def gibbs_sweep(state: LatentState, theta: GroupParams, gamma: Network,
                data: list[SubjectData], parc: Parcellation, cfg: ChainConfig,
                rng, h: Hyperparams | None = None):
    """One full Metropolis-within-Gibbs sweep over all blocks.

    Returns the updated (LatentState, GroupParams).  Stateless convenience
    wrapper around the chain machinery; `run_chain` reuses precomputed
    structures across sweeps instead.
    """
    h = h or Hyperparams()
    lattice = state.w.lattice if state.w is not None else None
    sampler = _Sampler(data, parc, gamma, h, cfg, lattice)
    raw = sampler.state_from_latent(state)
    theta = theta.copy()
    sampler.sweep(raw, theta, rng)
    return sampler.latent_from_state(raw), theta


def run_chain(data: list[SubjectData], parc: Parcellation, gamma: Network,
              h: Hyperparams, cfg: ChainConfig,
              lattice: ControlLattice | None = None,
              init_theta: GroupParams | None = None) -> ChainTrace:
    """Run a full Metropolis-within-Gibbs chain and return posterior summaries.

    The proposal std is tuned toward cfg.target_accept during burn-in
    (multiplicative 1.1/0.9 steps on windows of cfg.adapt_window proposals)
    and frozen afterwards.  Set cfg.omega (or pass a lattice) for the
    spatial-uncertainty mode; otherwise displacements stay frozen at zero.
    """
    rng = np.random.default_rng(cfg.seed)
    sampler = _Sampler(data, parc, gamma, h, cfg, lattice)
    state, theta = sampler.init_state(init_theta, rng)
    for _ in range(cfg.burn_in):
        sampler.sweep(state, theta, rng, adapt=True)
    sampler._accept = np.zeros_like(sampler._accept) if sampler._accept is not None else None

    mu_acc = np.zeros(sampler.d)
    x_acc = np.zeros((sampler.n, sampler.d))
    series = {
        "eta": np.empty((cfg.samples, sampler.N)),
        "nu2": np.empty((cfg.samples, sampler.N)),
        "sig2": np.empty((cfg.samples, sampler.N)),
        "sigS2": np.empty(cfg.samples),
    }
    net = Network(sampler.gamma.astype(int))
    s_avg = None
    for g in range(cfg.samples):
        sampler.sweep(state, theta, rng)
        mu_acc += state["mu"]
        x_acc += state["x"]
        series["eta"][g] = theta.eta
        series["nu2"][g] = theta.nu2
        series["sig2"][g] = theta.sig2
        series["sigS2"][g] = theta.sigS2
        latent = sampler.latent_from_state(state)
        S_S, S = sufficient_stats(latent, net, parc, h)
        if s_avg is None:
            s_avg = [S_S, S]
        else:
            s_avg[0] += (S_S - s_avg[0]) / (g + 1)
            s_avg[1] += (S - s_avg[1]) / (g + 1)
    theta_mean = GroupParams(
        sampler.gamma * series["eta"].mean(axis=0),
        series["nu2"].mean(axis=0),
        series["sig2"].mean(axis=0),
        float(series["sigS2"].mean()) if sampler.su else 0.0,
    )
    return ChainTrace(
        mu_mean=mu_acc / cfg.samples,
        x_mean=x_acc / cfg.samples,
        theta_series=series,
        accept_rates=sampler.accept_rates(),
        s_avg=tuple(s_avg),
        rw_sigma=sampler.rw_sigma,
        theta_mean=theta_mean,
    )


def _m_step(s_S, s, dj, gamma, h: Hyperparams, rank_nB: float | None,
            theta: GroupParams) -> GroupParams:
    """Closed-form MAP maximization from averaged sufficient statistics."""
    sig2 = s[:, 1] / (h.alpha + 1 + s[:, 0])
    nu2 = (s[:, 2] - 0.5 * s[:, 3] ** 2 / (dj + h.lam)) / (
        h.alpha + 1 + (dj + gamma) / 2
    )
    eta = gamma * s[:, 3] / (dj + h.lam)
    if np.any(sig2 <= 0) or np.any(nu2 <= 0):
        raise DegenerateStatsError("M-step produced non-positive variances")
    if rank_nB is not None:
        sigS2 = s_S / (h.alpha + 1 + rank_nB / 2)
        if sigS2 <= 0:
            raise DegenerateStatsError("M-step produced non-positive sigS2")
    else:
        sigS2 = 0.0
    return GroupParams(eta, nu2, sig2, sigS2)


def saem_fit(data: list[SubjectData], parc: Parcellation, gamma: Network,
             h: Hyperparams, cfg: ChainConfig,
             lattice: ControlLattice | None = None,
             init_theta: GroupParams | None = None):
    """MAP estimation by MCMC-SAEM.

    cfg.burn_in iterations use averaging weight c_k = 1 (exploration), the
    remaining cfg.samples use c_k = 1/k.  Each iteration simulates the
    latent blocks with one Gibbs sweep at the current theta, averages the
    complete-data sufficient statistics, and applies the closed-form M-step.
    Returns (theta_hat, trace).
    """
    rng = np.random.default_rng(cfg.seed)
    sampler = _Sampler(data, parc, gamma, h, cfg, lattice)
    state, theta = sampler.init_state(init_theta, rng)
    net = Network(sampler.gamma.astype(int))
    rank_nB = sampler.rank * sampler.n * sampler.B if sampler.su else None
    total = cfg.burn_in + cfg.samples
    s_S, s = None, None
    hist = {
        "eta": np.empty((total, sampler.N)),
        "nu2": np.empty((total, sampler.N)),
        "sig2": np.empty((total, sampler.N)),
        "sigS2": np.empty(total),
    }
    for k in range(total):
        sampler.sweep(state, theta, rng, adapt=(k < cfg.burn_in), update_theta=False)
        latent = sampler.latent_from_state(state)
        S_S, S = sufficient_stats(latent, net, parc, h)
        c_k = 1.0 if k < cfg.burn_in else 1.0 / (k - cfg.burn_in + 1)
        if s_S is None:
            s_S, s = S_S, S
        else:
            s_S += c_k * (S_S - s_S)
            s += c_k * (S - s)
        theta = _m_step(s_S, s, sampler.dj, sampler.gamma, h, rank_nB, theta)
        hist["eta"][k] = theta.eta
        hist["nu2"][k] = theta.nu2
        hist["sig2"][k] = theta.sig2
        hist["sigS2"][k] = theta.sigS2
    trace = ChainTrace(
        mu_mean=state["mu"].copy(),
        x_mean=state["x"].copy(),
        theta_series=hist,
        accept_rates=sampler.accept_rates(),
        s_avg=(s_S, s),
        rw_sigma=sampler.rw_sigma,
        theta_mean=theta,
    )
    return theta, trace


def sa_displacements(data: list[SubjectData], theta: GroupParams,
                     parc: Parcellation, rng,
                     lattice: ControlLattice | None = None,
                     omega: float | None = None,
                     tau: float = 0.99, steps: int = 100,
                     rw_sigma: float = 1.0) -> DisplacementSet:
    """Simulated-annealing search for the most probable displacements.

    Targets pi(w | y, theta)^(alpha_t) with the cooling schedule
    alpha_t = tau^(-t); the proposal variance at step t is rw_sigma^2 /
    alpha_t.  The likelihood term log f(y | w, theta) is evaluated
    incrementally through the displaced-block statistics.  Returns the
    best-scoring displacement set visited.
    """
    from .model import BlockLikelihood

    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0,1)")
    if theta.sigS2 <= 0:
        raise ValueError("annealing requires sigS2 > 0")
    Y, S2, grid = stack_subjects(data)
    n, d = Y.shape
    lattice = lattice or build_lattice(grid, omega)
    B, rank = lattice.count, grid.rank
    K = kernel_matrix(lattice)
    coords = grid.coordinates()
    affected = [np.flatnonzero(K[:, b] > 0.0) for b in range(B)]

    w = np.zeros((n, B, rank))
    u = np.zeros((n, d, rank))
    tgt = np.tile(np.arange(d, dtype=np.intp), (n, 1))
    tracker = BlockLikelihood(Y, S2, tgt, theta, parc)
    log_prior_w = 0.0  # sum over (i,b) of -||w||^2 / (2 sigS2), additive part only
    best = (tracker.total, w.copy())

    for t in range(1, steps + 1):
        alpha_t = tau ** (-t)
        prop_std = rw_sigma / np.sqrt(alpha_t)
        for i in range(n):
            for b in range(B):
                old = w[i, b]
                new = old + prop_std * rng.standard_normal(rank)
                prior_delta = (old @ old - new @ new) / (2 * theta.sigS2)
                vox = affected[b]
                du = np.outer(K[vox, b], new - old)
                t_new = displaced_targets(grid, coords[vox], u[i, vox] + du)
                lik_delta, record = tracker.propose(i, vox, t_new)
                log_ratio = alpha_t * (prior_delta + lik_delta)
                if np.log(rng.random()) < log_ratio:
                    tracker.apply(record)
                    w[i, b] = new
                    u[i, vox] += du
                    log_prior_w += prior_delta
                    score = tracker.total + log_prior_w
                    if score > best[0]:
                        best = (score, w.copy())
    return DisplacementSet(lattice, best[1])
