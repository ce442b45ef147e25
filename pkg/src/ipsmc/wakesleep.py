"""Outer training loop: sleep updates of the twist on prior simulations,
wake updates of the rate parameters on posterior paths drawn with twisted
SMC under a lagged parameter copy.

Rate parameters are optimized as unconstrained logs, so positivity is
structural. Inside the wake sampler both the proposal and the weights use
the lagged copy; the current parameters enter only through the wake loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CollapseError
from .ips import SIRSParams, euler_simulate_batch, make_grid
from .smc import SMCConfig, sample_path_index, tsmc_run
from .twisting import ObservationSequence, emission_log_potential, sample_emission
from . import twistnet as tn


@dataclass
class TrainConfig:
    global_iters: int = 25
    steps_per_phase: int = 25
    batch: int = 16
    particles: int = 10
    dt: float = 0.05
    mc_loss: bool = True
    reuse: int = 25
    lr_psi: float = 3e-4
    lr_theta: float = 5e-3
    seed: int = 0
    loss: str = "kl"
    width: int = 64
    ess_threshold: float = 1.0
    pretrain_steps: int = 2500
    pretrain_window: int = 100
    pretrain_rel_tol: float = 1e-3

    def __post_init__(self):
        if min(self.batch, self.particles, self.reuse) < 1:
            raise ValueError("batch, particles and reuse must be >= 1")
        if self.loss not in ("kl", "dre"):
            raise ValueError("loss must be 'kl' or 'dre'")


@dataclass
class ThetaState:
    """Rate parameters in unconstrained log space plus optimizer state and
    the lagged copy used by the wake-phase sampler."""

    log_theta: np.ndarray
    adam: tn.AdamState
    lagged: SIRSParams

    @classmethod
    def init(cls, theta0: SIRSParams):
        log_theta = np.log(theta0.as_array())
        return cls(log_theta=log_theta,
                   adam=tn.AdamState.init({"log_theta": log_theta}),
                   lagged=theta0)

    def params(self) -> SIRSParams:
        return SIRSParams.from_array(np.exp(self.log_theta))

    def refresh_lag(self):
        self.lagged = self.params()


def wake_loss_and_grad(theta: SIRSParams, model, spec, states, obs, grid,
                       mc_index=None):
    """Discretized complete-data objective of one grid path and its
    observations; gradient in the natural (rate) parameterization.

    Per step the path pays the held state's exit rate times the step
    length and earns the log intensity of every realized coordinate
    change; emission and initial terms carry no rate parameters here but
    are included in the value.
    """
    grid = np.asarray(grid)
    states = np.asarray(states)
    M = len(grid) - 1
    d = states.shape[1]
    rows = np.arange(d)
    n_par = len(theta.as_array())

    loss = 0.0
    for k, tau in enumerate(obs.times):
        j = int(np.argmin(np.abs(grid - tau)))
        loss -= emission_log_potential(obs, k, states[j])

    grad = np.zeros(n_par)
    idx = [mc_index] if mc_index is not None else range(M)
    scale = float(M) if mc_index is not None else 1.0
    for m in idx:
        dt = grid[m + 1] - grid[m]
        z, z_next = states[m], states[m + 1]
        off = model.off_rates_batch(grid[m], z[None, :], spec, theta)[0]
        rg = model.rate_grad_fn(grid[m], z, spec, theta)  # (d, V, P)
        loss += scale * dt * float(off.sum())
        grad += scale * dt * rg.sum(axis=(0, 1))
        jumped = z_next != z
        for i in rows[jumped]:
            r = off[i, z_next[i]]
            if r <= 0:
                return -np.inf, grad
            loss -= scale * float(np.log(r))
            grad -= scale * rg[i, z_next[i]] / r
    return loss, grad


def wake_grad_dense(model, spec, theta, skeletons, grid, tiny_cache=None):
    """Same estimator as wake_loss_and_grad, vectorized over dense state
    indices for small systems: skeletons is (N, M+1) of state indices.
    Returns the mean gradient of the *negative* loss (the score estimate).
    """
    from .oracle import neighbor_index_table, state_table

    table = state_table(spec)
    nbr = neighbor_index_table(spec)
    n = len(table)
    P = len(theta.as_array())
    exit_grad = np.zeros((n, P))
    pair_grad = {}
    for s in range(n):
        z = table[s]
        off = model.off_rates_batch(0.0, z[None, :], spec, theta)[0]
        rg = model.rate_grad_fn(0.0, z, spec, theta)
        exit_grad[s] = rg.sum(axis=(0, 1))
        for i in range(spec.d):
            for v in range(spec.V):
                if v != z[i] and off[i, v] > 0:
                    pair_grad[(s, nbr[s, i, v])] = rg[i, v] / off[i, v]

    grid = np.asarray(grid)
    dts = np.diff(grid)
    N = skeletons.shape[0]
    g = np.zeros(P)
    for m in range(len(dts)):
        counts = np.bincount(skeletons[:, m], minlength=n)
        g -= dts[m] * counts @ exit_grad
        cur, nxt = skeletons[:, m], skeletons[:, m + 1]
        moved = cur != nxt
        if np.any(moved):
            pairs, cnt = np.unique(np.stack([cur[moved], nxt[moved]], axis=1),
                                   axis=0, return_counts=True)
            for (a, b), c in zip(pairs, cnt):
                pg = pair_grad.get((int(a), int(b)))
                if pg is not None:
                    g += c * pg
    return g / N


@dataclass
class Telemetry:
    rows: list = field(default_factory=list)

    def add(self, global_iter, phase, step, loss, mean_ess, min_ess, theta, rpe):
        self.rows.append({
            "global_iter": global_iter, "phase": phase, "step": step,
            "loss": loss, "mean_ess": mean_ess, "min_ess": min_ess,
            "alpha0": theta.alpha0, "alpha1": theta.alpha1,
            "beta": theta.beta, "gamma": theta.gamma, "rpe": rpe,
        })


def _simulate_sleep_batch(model, spec, theta, p0, tau_grids, obs_template, cfg, rng,
                          with_negatives=False):
    """Prior paths on each item's grid with synthetic observations at the
    item's snapshot times."""
    items = []
    for taus in tau_grids:
        grid = make_grid(obs_template.horizon, cfg.dt, taus)
        z0 = p0.sample(rng, 1)
        states = euler_simulate_batch(model, spec, theta, z0, grid, rng)[0]
        tau_idx = [int(np.argmin(np.abs(grid - tau))) for tau in taus]
        values = np.stack([sample_emission(obs_template, states[j], rng)
                           for j in tau_idx]) if len(tau_idx) else np.zeros((0, spec.d), dtype=np.int64)
        obs = ObservationSequence(horizon=obs_template.horizon, times=np.asarray(taus),
                                  values=values, V=spec.V,
                                  p_mask=obs_template.p_mask,
                                  label_noise=obs_template.label_noise)
        ctx = tn.TwistContext(spec, obs)
        if with_negatives:
            zn0 = p0.sample(rng, 1)
            neg = euler_simulate_batch(model, spec, theta, zn0, grid, rng)[0]
            items.append(tn.DREItem(grid=grid, states_pos=states, states_neg=neg, ctx=ctx))
        else:
            items.append(tn.SleepItem(grid=grid, states=states, ctx=ctx))
    return items


def sleep_phase(psi, psi_adam, theta, model, spec, p0, tau_grids, obs_template,
                cfg, rng, n_steps, telemetry=None, global_iter=0, truth=None):
    """n_steps optimizer steps on the twist; fresh prior batches every
    cfg.reuse steps, one loss term per step (Monte Carlo over time) when
    cfg.mc_loss is set."""
    hyper = tn.AdamHyper(lr=cfg.lr_psi)
    items = None
    step = 0
    while step < n_steps:
        batch_taus = [tau_grids[int(rng.integers(len(tau_grids)))] for _ in range(cfg.batch)]
        items = _simulate_sleep_batch(model, spec, theta, p0, batch_taus,
                                      obs_template, cfg, rng,
                                      with_negatives=cfg.loss == "dre")
        for _ in range(min(cfg.reuse, n_steps - step)):
            if cfg.mc_loss:
                mcs = [int(rng.integers(len(it.grid) - 1)) for it in items]
            else:
                mcs = None
            if cfg.loss == "dre":
                loss, grads = tn.dre_loss(psi, spec, items, mc_indices=mcs)
            else:
                loss, grads = tn.sleep_loss_forward_kl(psi, model, spec, theta,
                                                       items, mc_indices=mcs,
                                                       q0_support=q0_support_logmask(p0))
            new = tn.adam_step(psi.arrays(), grads, psi_adam, hyper)
            psi = psi.replace_arrays(new)
            step += 1
            if telemetry is not None:
                rpe = _rpe(theta, truth) if truth is not None else float("nan")
                telemetry.add(global_iter, "sleep", step, loss,
                              float("nan"), float("nan"), theta, rpe)
        if step >= n_steps:
            break
    return psi


def q0_support_logmask(p0):
    """Log-mask of the prior initial support: 0 where a node value can
    occur at time zero, -inf elsewhere."""
    mask = np.where(p0.probs > 0, 0.0, -np.inf)
    return mask


def _rpe(theta: SIRSParams, truth: SIRSParams):
    a, b = theta.as_array(), truth.as_array()
    return float(np.sum(np.abs(a - b) / np.abs(b)))


def wake_phase(theta_state: ThetaState, psi, model, spec, p0, dataset_obs,
               cfg, rng, n_steps, telemetry=None, global_iter=0, truth=None,
               skip_counter=None, pool=None):
    """n_steps optimizer steps on the rate parameters: per batch, run
    twisted SMC under the lagged parameters, draw one path per item by
    importance resampling, then reuse the batch for several steps."""
    hyper = tn.AdamHyper(lr=cfg.lr_theta)
    step = 0
    theta_bar = theta_state.lagged
    while step < n_steps:
        picks = [int(rng.integers(len(dataset_obs))) for _ in range(cfg.batch)]
        seeds = [int(rng.integers(2**63)) for _ in picks]
        jobs = [(dataset_obs[i], s) for i, s in zip(picks, seeds)]
        results = _map(pool, lambda job: _wake_sample(model, spec, theta_bar, psi,
                                                      p0, job[0], cfg, job[1]), jobs)
        batch = []
        ess_stats = []
        for res in results:
            if res is None:
                if skip_counter is not None:
                    skip_counter["skipped"] += 1
                continue
            batch.append(res[:3])
            ess_stats.append(res[3])
        if skip_counter is not None:
            skip_counter["attempted"] += len(jobs)
        if not batch:
            continue
        mean_ess = float(np.mean([e[0] for e in ess_stats]))
        min_ess = float(np.min([e[1] for e in ess_stats]))
        for _ in range(min(cfg.reuse, n_steps - step)):
            theta = theta_state.params()
            losses = []
            grad = np.zeros(4)
            for states, obs, grid in batch:
                mc = int(rng.integers(len(grid) - 1)) if cfg.mc_loss else None
                lo, gr = wake_loss_and_grad(theta, model, spec, states, obs, grid,
                                            mc_index=mc)
                losses.append(lo)
                grad += gr
            grad /= len(batch)
            # chain rule into log space; wake loss is minimized
            glog = grad * np.exp(theta_state.log_theta)
            new = tn.adam_step({"log_theta": theta_state.log_theta},
                               {"log_theta": glog}, theta_state.adam, hyper)
            theta_state.log_theta = new["log_theta"]
            step += 1
            if telemetry is not None:
                cur = theta_state.params()
                rpe = _rpe(cur, truth) if truth is not None else float("nan")
                telemetry.add(global_iter, "wake", step, float(np.mean(losses)),
                              mean_ess, min_ess, cur, rpe)
    return theta_state


def _wake_sample(model, spec, theta_bar, psi, p0, obs, cfg, seed):
    """One tSMC run and one resampled path; None on weight collapse."""
    twist = tn.LearnedTwist(psi, spec, obs)
    smc_cfg = SMCConfig(S=cfg.particles, dt=cfg.dt,
                        ess_threshold=cfg.ess_threshold, store_paths=True,
                        seed=seed)
    try:
        ens, _ = tsmc_run(model, spec, theta_bar, twist,
                          twist.q0_dist(q0_support_logmask(p0)), p0,
                          obs, smc_cfg)
    except CollapseError:
        return None
    rng = np.random.default_rng(seed + 1)
    s = sample_path_index(ens, rng)
    ess = np.array([e for _, e in ens.ess_history])
    return ens.trajectories[s], obs, ens.grid, (float(ess.mean()), float(ess.min()))


def _map(pool, fn, jobs):
    if pool is None:
        return [fn(j) for j in jobs]
    return list(pool.map(fn, jobs))


def train(model, spec, p0, dataset_obs, theta0: SIRSParams, cfg: TrainConfig,
          truth=None, checkpoint_dir=None, pool=None):
    """Alternating wake-sleep (optional sleep-only warm start first).

    Returns (ThetaState, twist params, Telemetry). The twist is frozen
    during each wake phase and the lagged copy refreshes once per global
    iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    psi = tn.init_params(spec.V, m=cfg.width, seed=cfg.seed)
    psi_adam = tn.AdamState.init(psi.arrays())
    theta_state = ThetaState.init(theta0)
    telemetry = Telemetry()
    tau_grids = [np.asarray(o.times) for o in dataset_obs]
    obs_template = dataset_obs[0]
    skip_counter = {"skipped": 0, "attempted": 0}

    if cfg.pretrain_steps > 0:
        psi = _pretrain(psi, psi_adam, theta_state, model, spec, p0, tau_grids,
                        obs_template, cfg, rng, telemetry, truth)

    for g in range(1, cfg.global_iters + 1):
        psi = sleep_phase(psi, psi_adam, theta_state.params(), model, spec, p0,
                          tau_grids, obs_template, cfg, rng, cfg.steps_per_phase,
                          telemetry, g, truth)
        theta_state.refresh_lag()
        theta_state = wake_phase(theta_state, psi, model, spec, p0, dataset_obs,
                                 cfg, rng, cfg.steps_per_phase, telemetry, g,
                                 truth, skip_counter, pool)
        if checkpoint_dir is not None:
            tn.save_checkpoint(f"{checkpoint_dir}/checkpoint_{g:04d}.npz", psi,
                               psi_adam, meta={"global_iter": g,
                                               "loss": cfg.loss,
                                               "theta": list(theta_state.params().as_array())})
    if skip_counter["attempted"]:
        rate = skip_counter["skipped"] / skip_counter["attempted"]
        if rate > 0.10:
            raise RuntimeError(f"wake-phase collapse skip rate {rate:.1%} exceeds 10%")
    return theta_state, psi, telemetry


def _pretrain(psi, psi_adam, theta_state, model, spec, p0, tau_grids,
              obs_template, cfg, rng, telemetry, truth):
    """Sleep-only warm start, early-stopped on a loss plateau."""
    window = cfg.pretrain_window
    losses = []
    hyper = tn.AdamHyper(lr=cfg.lr_psi)
    theta = theta_state.params()
    step = 0
    while step < cfg.pretrain_steps:
        batch_taus = [tau_grids[int(rng.integers(len(tau_grids)))] for _ in range(cfg.batch)]
        items = _simulate_sleep_batch(model, spec, theta, p0, batch_taus,
                                      obs_template, cfg, rng,
                                      with_negatives=cfg.loss == "dre")
        for _ in range(min(cfg.reuse, cfg.pretrain_steps - step)):
            mcs = ([int(rng.integers(len(it.grid) - 1)) for it in items]
                   if cfg.mc_loss else None)
            if cfg.loss == "dre":
                loss, grads = tn.dre_loss(psi, spec, items, mc_indices=mcs)
            else:
                loss, grads = tn.sleep_loss_forward_kl(psi, model, spec, theta,
                                                       items, mc_indices=mcs,
                                                       q0_support=q0_support_logmask(p0))
            psi = psi.replace_arrays(tn.adam_step(psi.arrays(), grads, psi_adam, hyper))
            losses.append(loss)
            step += 1
            rpe = _rpe(theta, truth) if truth is not None else float("nan")
            telemetry.add(0, "pretrain", step, loss, float("nan"), float("nan"),
                          theta, rpe)
        if len(losses) >= 2 * window:
            prev = float(np.mean(losses[-2 * window:-window]))
            last = float(np.mean(losses[-window:]))
            denom = max(abs(prev), 1e-9)
            if (prev - last) / denom < cfg.pretrain_rel_tol:
                break
    return psi
