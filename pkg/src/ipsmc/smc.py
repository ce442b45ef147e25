"""Weighted-particle machinery: ESS, systematic resampling, the bootstrap
filter, and twisted SMC with the tilt-induced proposal.

Weight bookkeeping follows the product-of-mean-increments normalizer: at
every resampling event the accumulator absorbs the log-mean of the
current weights and the weights reset to uniform; the final log-mean is
added at the horizon. With a constant twist and no potentials every
increment is exactly zero, so the estimate is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import CollapseError
from .ips import make_grid
from .twisting import ConstantTwist, SCORE_CLIP, emission_log_table


@dataclass
class SMCConfig:
    S: int
    dt: float
    ess_threshold: float = 1.0
    store_paths: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")


@dataclass
class ParticleEnsemble:
    grid: np.ndarray
    states: np.ndarray        # (S, d) final states
    log_weights: np.ndarray   # (S,) final unnormalized log weights
    trajectories: np.ndarray | None  # (S, M+1, d) if stored
    ancestry: list = field(default_factory=list)      # (time, (S,) indices)
    ess_history: list = field(default_factory=list)   # (time, ess)

    @property
    def S(self):
        return len(self.log_weights)

    def normalized_weights(self):
        lw = self.log_weights - logsumexp(self.log_weights)
        return np.exp(lw)


def effective_sample_size(log_weights):
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not np.any(finite):
        raise CollapseError("all particle weights are -inf")
    lwn = lw - logsumexp(lw)
    return float(np.exp(-logsumexp(2.0 * lwn)))


def systematic_resample(log_weights, rng, n_out=None):
    """Ancestor indices with one shared uniform shift; offspring counts are
    floor or ceil of n_out * normalized weight, indices come out sorted."""
    lw = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(lw)):
        raise CollapseError("cannot resample collapsed weights")
    w = np.exp(lw - logsumexp(lw))
    if n_out is None:
        n_out = len(w)
    positions = (rng.random() + np.arange(n_out)) / n_out
    cum = np.cumsum(w)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").astype(np.int64)


class FactorizedInitial:
    """Product over nodes of per-node categoricals: probs is (d, V)."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float)
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-12):
            raise ValueError("rows must be distributions")
        self.probs = probs
        with np.errstate(divide="ignore"):
            self.log_probs = np.log(probs)

    def sample(self, rng, S):
        d, V = self.probs.shape
        u = rng.random((S, d, 1))
        return (u < np.cumsum(self.probs, axis=1)[None]).argmax(axis=2).astype(np.int64)

    def log_pmf_batch(self, Z):
        d = self.probs.shape[0]
        return self.log_probs[np.arange(d)[None, :], Z].sum(axis=1)


class DenseInitial:
    """Explicit distribution over the enumerated state space (tiny systems)."""

    def __init__(self, spec, probs):
        from .oracle import state_table

        self.table = state_table(spec)
        self.spec = spec
        probs = np.asarray(probs, dtype=float)
        self.probs = probs / probs.sum()
        with np.errstate(divide="ignore"):
            self.log_probs = np.log(self.probs)

    def sample(self, rng, S):
        idx = rng.choice(len(self.probs), size=S, p=self.probs)
        return self.table[idx]

    def log_pmf_batch(self, Z):
        from .oracle import state_index

        idx = np.array([state_index(self.spec, z) for z in Z])
        return self.log_probs[idx]


def doob_initial(spec, p0_vec, lookahead):
    """Exact twisted initial distribution: prior mass times look-ahead."""
    with np.errstate(divide="ignore"):
        logq = np.log(np.asarray(p0_vec, dtype=float)) + lookahead.log_h[0]
    m = logq.max()
    return DenseInitial(spec, np.exp(logq - m))


def _potential_lookup(obs, grid):
    """Map grid index -> observation index for grid points that carry one."""
    out = {}
    for k, tau in enumerate(obs.times):
        j = int(np.argmin(np.abs(grid - tau)))
        if abs(grid[j] - tau) > 1e-9:
            raise ValueError(f"grid does not contain observation time {tau}")
        out[j] = k
    return out


def run_smc(model, spec, theta, twist, q0, p0, obs, cfg, grid=None):
    """Generic twisted SMC (Algorithm: propose with the tilted product
    kernel, weight by prior/proposal times the twist ratio times any
    potential hit at the new grid time, resample adaptively).

    Returns (ParticleEnsemble, log normalizer estimate).
    """
    if grid is None:
        grid = make_grid(obs.horizon, cfg.dt, obs.times)
    grid = np.asarray(grid, dtype=float)
    M = len(grid) - 1
    pot = _potential_lookup(obs, grid)
    rng = np.random.default_rng(cfg.seed)
    S = cfg.S

    Z = q0.sample(rng, S)
    lh = twist.log_h_batch(grid[0], Z)
    logw = p0.log_pmf_batch(Z) + lh - q0.log_pmf_batch(Z)
    if 0 in pot:
        logw = logw + _emission_batch(obs, pot[0], Z)
    _check_alive(logw, step=0)

    traj = None
    if cfg.store_paths:
        traj = np.empty((S, M + 1, Z.shape[1]), dtype=np.int64)
        traj[:, 0] = Z

    log_z = 0.0
    ancestry = []
    ess_history = []
    log_S = np.log(S)

    for m in range(M):
        t, t1 = grid[m], grid[m + 1]
        dt = t1 - t
        ess = effective_sample_size(logw)
        ess_history.append((float(t), ess))
        if ess < cfg.ess_threshold * S:
            log_z += float(logsumexp(logw)) - log_S
            anc = systematic_resample(logw, rng)
            Z = Z[anc]
            lh = lh[anc]
            if traj is not None:
                traj[:, : m + 1] = traj[anc, : m + 1]
            logw = np.zeros(S)
            ancestry.append((float(t), anc))

        Z, log_ratio = _propose_step(model, spec, theta, twist, Z, t, dt, rng)
        lh_next = twist.log_h_batch(t1, Z)
        logw = logw + log_ratio + (lh_next - lh)
        if m + 1 in pot:
            logw = logw + _emission_batch(obs, pot[m + 1], Z)
        _check_alive(logw, step=m + 1)
        lh = lh_next
        if traj is not None:
            traj[:, m + 1] = Z

    log_z += float(logsumexp(logw)) - log_S
    ens = ParticleEnsemble(grid=grid, states=Z, log_weights=logw,
                           trajectories=traj, ancestry=ancestry,
                           ess_history=ess_history)
    return ens, log_z


def _check_alive(logw, step):
    if not np.any(np.isfinite(logw)):
        raise CollapseError("total weight collapse", step=step)


def _emission_batch(obs, k, Z):
    table = emission_log_table(obs, k)
    d = Z.shape[1]
    return table[np.arange(d)[None, :], Z].sum(axis=1)


def _propose_step(model, spec, theta, twist, Z, t, dt, rng):
    """Advance every particle by one grid step under the tilted kernel and
    return the summed log prior/proposal kernel ratio.

    Coordinates whose score row is zero contribute exactly zero to the
    ratio. Steps that violate the small-interval bound for either kernel
    are subdivided with the twist table frozen at the left grid time, so
    the twist ratios still telescope across the step.
    """
    S, d = Z.shape
    scores = np.clip(twist.score_table_batch(t, Z), -SCORE_CLIP, SCORE_CLIP)
    base_off = model.off_rates_batch(t, Z, spec, theta)
    tw_off = base_off * np.exp(scores)
    exit_b = base_off.sum(axis=2)
    exit_t = tw_off.sum(axis=2)
    worst = np.maximum(exit_b.max(axis=1), exit_t.max(axis=1)) * dt
    needs_split = worst > 0.995

    Z_new = Z.copy()
    log_ratio = np.zeros(S)

    easy = ~needs_split
    if np.any(easy):
        Zi = Z[easy]
        ne = len(Zi)
        rows = np.arange(ne)[:, None], np.arange(d)[None, :]
        probs = dt * tw_off[easy]
        probs[rows[0], rows[1], Zi] = 1.0 - dt * exit_t[easy]
        u = rng.random((ne, d, 1))
        Znext = (u < np.cumsum(probs, axis=2)).argmax(axis=2).astype(np.int64)
        jumped = Znext != Zi
        b_at = base_off[easy][rows[0], rows[1], Znext]
        t_at = tw_off[easy][rows[0], rows[1], Znext]
        with np.errstate(divide="ignore", invalid="ignore"):
            jump_term = np.log(b_at) - np.log(t_at)
        stay_term = np.log1p(-dt * exit_b[easy]) - np.log1p(-dt * exit_t[easy])
        contrib = np.where(jumped, jump_term, stay_term)
        log_ratio[easy] = contrib.sum(axis=1)
        Z_new[easy] = Znext

    # Particles that would break the small-interval bound take the largest
    # admissible substep repeatedly, recomputing rates after every move.
    # The substep schedule is a deterministic function of the visited
    # states, so the realized proposal pmf is exactly what is accumulated.
    for s in np.flatnonzero(needs_split):
        z = Z[s].copy()
        remaining = dt
        acc = 0.0
        while remaining > 1e-15:
            sc = np.clip(twist.score_table(t, z), -SCORE_CLIP, SCORE_CLIP)
            b_off = model.off_rates_batch(t, z[None, :], spec, theta)[0]
            t_off = b_off * np.exp(sc)
            eb = b_off.sum(axis=1)
            et = t_off.sum(axis=1)
            wc = max(float(eb.max()), float(et.max()))
            step_dt = remaining if wc * remaining <= 0.995 else 0.995 / wc
            probs = step_dt * t_off
            probs[np.arange(d), z] = 1.0 - step_dt * et
            u = rng.random(d)
            z_next = (u[:, None] < np.cumsum(probs, axis=1)).argmax(axis=1).astype(np.int64)
            jumped = z_next != z
            with np.errstate(divide="ignore", invalid="ignore"):
                jt = np.log(b_off[np.arange(d), z_next]) - np.log(
                    t_off[np.arange(d), z_next])
            st = np.log1p(-step_dt * eb) - np.log1p(-step_dt * et)
            acc += float(np.where(jumped, jt, st).sum())
            z = z_next
            remaining -= step_dt
        Z_new[s] = z
        log_ratio[s] = acc

    return Z_new, log_ratio


def tsmc_run(model, spec, theta, twist, q0, p0, obs, cfg, grid=None):
    """Twisted SMC with an arbitrary twist oracle and initial proposal."""
    return run_smc(model, spec, theta, twist, q0, p0, obs, cfg, grid=grid)


def bpf_run(model, spec, theta, p0, obs, cfg, grid=None):
    """Bootstrap filter: prior proposal, weights only at observation times."""
    twist = ConstantTwist(spec.d, spec.V)
    return run_smc(model, spec, theta, twist, p0, p0, obs, cfg, grid=grid)


def posterior_marginals_from_ensemble(ens: ParticleEnsemble, V, eps=1e-3):
    """Per-time nodewise frequency tables from the stored trajectories,
    weighted by the final normalized weights and smoothed with a uniform
    mixture: (M+1, d, V) with rows summing to one."""
    if ens.trajectories is None:
        raise ValueError("trajectories were not stored")
    w = ens.normalized_weights()
    M1, d = ens.trajectories.shape[1:]
    out = np.zeros((M1, d, V))
    for v in range(V):
        out[:, :, v] = np.tensordot(w, ens.trajectories == v, axes=(0, 0))
    return (1.0 - eps) * out + eps / V


def sample_path_index(ens: ParticleEnsemble, rng):
    """One particle index by importance resampling of the final weights."""
    return int(rng.choice(ens.S, p=ens.normalized_weights()))
