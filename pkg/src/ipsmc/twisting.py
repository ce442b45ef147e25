"""Potentials, twisted rates, and the diagnostics coupling a prior process
to its (approximate) posterior.

A twist assigns every (t, z) a positive value approximating the
conditional expectation of future potentials. Only log values and log
score ratios ever appear; nothing here exponentiates an unnormalized
product over nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StepSizeError
from .ips import RateField, TwistedRateField, euler_kernel_log_pmf, euler_kernel_sample

MASK = -1  # sentinel meaning "use spec.V"


def mask_token(spec_or_V):
    V = spec_or_V if isinstance(spec_or_V, int) else spec_or_V.V
    return V


@dataclass
class ObservationSequence:
    """Per-node snapshots at strictly increasing times; value V means masked."""

    horizon: float
    times: np.ndarray          # (K,)
    values: np.ndarray         # (K, d) ints in [0, V]
    V: int
    p_mask: float
    label_noise: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=np.int64)
        if len(self.times) != len(self.values):
            raise ValueError("times and values disagree in length")
        if len(self.times) and (np.any(np.diff(self.times) <= 0)):
            raise ValueError("observation times must be strictly increasing")
        if len(self.times) and (self.times[0] <= 0 or self.times[-1] > self.horizon):
            raise ValueError("observation times must lie in (0, horizon]")
        if np.any(self.values < 0) or np.any(self.values > self.V):
            raise ValueError("observed values must lie in [0, V] (V = mask)")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ValueError("p_mask must lie in [0, 1]")
        if self.label_noise < 0:
            raise ValueError("label_noise must be >= 0")

    @property
    def K(self):
        return len(self.times)

    @property
    def d(self):
        return self.values.shape[1] if self.values.ndim == 2 else 0


def emission_log_table(obs: ObservationSequence, k):
    """(d, V) table of log g(y_k^i | z_i = v)."""
    V = obs.V
    d = obs.d
    y = obs.values[k]
    delta = obs.label_noise
    out = np.empty((d, V))
    with np.errstate(divide="ignore"):
        log_mask = np.log(obs.p_mask) if obs.p_mask > 0 else -np.inf
        log_hit = np.log((1 - obs.p_mask) * (1 - delta * (V - 1)))
        log_miss = np.log((1 - obs.p_mask) * delta)
    for i in range(d):
        if y[i] == V:
            out[i, :] = log_mask
        else:
            out[i, :] = log_miss
            out[i, y[i]] = log_hit
    return out


def emission_log_potential(obs: ObservationSequence, k, z):
    """log G_{tau_k}(z): sum of per-node emission log-likelihoods."""
    table = emission_log_table(obs, k)
    return float(table[np.arange(obs.d), np.asarray(z)].sum())


def sample_emission(obs_template, z, rng):
    """Draw one observation row for latent state z under (p_mask, delta, V)."""
    V = obs_template.V
    delta = obs_template.label_noise
    d = len(z)
    y = np.empty(d, dtype=np.int64)
    masked = rng.random(d) < obs_template.p_mask
    for i in range(d):
        if masked[i]:
            y[i] = V
        elif delta > 0 and rng.random() < delta * (V - 1):
            others = [v for v in range(V) if v != z[i]]
            y[i] = others[rng.integers(len(others))]
        else:
            y[i] = z[i]
    return y


class TwistOracle:
    """Interface: log twist values and the d x V table of log score ratios
    log h(z^{i->v}) - log h(z), zero at v = z_i."""

    def log_h(self, t, z):
        raise NotImplementedError

    def log_h_left(self, t, z):
        """Left limit at t (differs from log_h only at potential times)."""
        return self.log_h(t, z)

    def score_table(self, t, z):
        raise NotImplementedError

    def log_h_batch(self, t, Z):
        return np.array([self.log_h(t, z) for z in Z])

    def score_table_batch(self, t, Z):
        return np.stack([self.score_table(t, z) for z in Z])

    def q0_log_pmf(self, z):
        """Log initial proposal mass; default is the twist-tilted prior
        handled by the caller, so plain oracles do not provide one."""
        raise NotImplementedError


class ConstantTwist(TwistOracle):
    """h identically one; twisted SMC degenerates to the bootstrap filter."""

    def __init__(self, d, V):
        self.d, self.V = d, V

    def log_h(self, t, z):
        return 0.0

    def score_table(self, t, z):
        return np.zeros((self.d, self.V))

    def log_h_batch(self, t, Z):
        return np.zeros(len(Z))

    def score_table_batch(self, t, Z):
        return np.zeros((len(Z), self.d, self.V))


class ExactTwist(TwistOracle):
    """Twist backed by an exact look-ahead table on the dense state space."""

    def __init__(self, table, spec):
        from .oracle import neighbor_index_table, state_index

        self._table = table
        self._spec = spec
        self._nbr = neighbor_index_table(spec)
        self._sidx = lambda z: state_index(spec, z)
        self._cache = {}

    def _log_h_vec(self, t, side="right"):
        key = (float(t), side)
        if key not in self._cache:
            self._cache[key] = self._table.log_h_at(t, side=side)
        return self._cache[key]

    def log_h(self, t, z):
        return float(self._log_h_vec(t)[self._sidx(z)])

    def log_h_left(self, t, z):
        return float(self._log_h_vec(t, "left")[self._sidx(z)])

    def score_table(self, t, z):
        lh = self._log_h_vec(t)
        s = self._sidx(z)
        out = lh[self._nbr[s]] - lh[s]
        out[np.arange(self._spec.d), np.asarray(z)] = 0.0
        return out

    def log_h_batch(self, t, Z):
        lh = self._log_h_vec(t)
        idx = np.array([self._sidx(z) for z in Z])
        return lh[idx]

    def score_table_batch(self, t, Z):
        lh = self._log_h_vec(t)
        idx = np.array([self._sidx(z) for z in Z])
        out = lh[self._nbr[idx]] - lh[idx, None, None]
        out[np.arange(len(Z))[:, None], np.arange(self._spec.d)[None, :], Z] = 0.0
        return out


SCORE_CLIP = 35.0  # numerical guard on exp(score); far beyond trained values


def twist_rate_field(base: RateField, score, z) -> TwistedRateField:
    """Multiplicative tilt of the off-target rates by exp(score); the
    diagonal is recomputed as the negative twisted exit rate."""
    score = np.asarray(score, dtype=float)
    if not np.all(np.isfinite(score)):
        raise ValueError("score table must be finite")
    z = np.asarray(z)
    d = base.rates.shape[0]
    off = base.rates.copy()
    off[np.arange(d), z] = 0.0
    off = off * np.exp(np.clip(score, -SCORE_CLIP, SCORE_CLIP))
    return TwistedRateField.from_off_rates(off, z)


def twisted_kernel_sample(twisted: TwistedRateField, z, dt, rng):
    return euler_kernel_sample(twisted, z, dt, rng)


def twisted_kernel_log_pmf(twisted: TwistedRateField, z, z_next, dt):
    return euler_kernel_log_pmf(twisted, z, z_next, dt)


def substep_count(base: RateField, twisted: TwistedRateField, z, dt, margin=0.995):
    """Number of equal subdivisions of dt needed so both the base and the
    tilted kernels satisfy the small-interval bound."""
    z = np.asarray(z)
    worst = max(float(base.exit_rates(z).max()), float(twisted.exit_rates(z).max()))
    if worst <= 0:
        return 1
    return max(1, int(np.ceil(dt * worst / margin)))


def reset_residual(twist: TwistOracle, log_g, t, z):
    """Violation of the multiplicative reset at a potential time:
    log h(t-) - log G_t - log h(t). Zero for the exact look-ahead."""
    return twist.log_h_left(t, z) - log_g(t, z) - twist.log_h(t, z)


def incremental_ess(proposal, target):
    """1 / E_proposal[(target / proposal)^2] over a shared enumerated
    support; both arguments are normalized pmfs. Equals 1 iff they match."""
    q = np.asarray(proposal, dtype=float)
    p = np.asarray(target, dtype=float)
    bad = (q <= 0) & (p > 0)
    if np.any(bad):
        import warnings

        warnings.warn("target puts mass where the proposal has none; ESS = 0")
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio2 = np.where(p > 0, p * p / np.where(q > 0, q, 1.0), 0.0)
    return float(1.0 / ratio2.sum())


def write_observations(f, obs: ObservationSequence):
    f.write(
        f"K={obs.K} d={obs.d} V={obs.V} p_mask={float(obs.p_mask)!r} delta={float(obs.label_noise)!r}\n"
    )
    for k in range(obs.K):
        row = ",".join(str(int(v)) for v in obs.values[k])
        f.write(f"{float(obs.times[k])!r},{row}\n")


def read_observations(f, horizon):
    header = f.readline().strip().split()
    kv = dict(tok.split("=", 1) for tok in header)
    K, d, V = int(kv["K"]), int(kv["d"]), int(kv["V"])
    times = np.empty(K)
    values = np.empty((K, d), dtype=np.int64)
    for k in range(K):
        parts = f.readline().strip().split(",")
        times[k] = float(parts[0])
        values[k] = [int(x) for x in parts[1:]]
    return ObservationSequence(horizon=horizon, times=times, values=values, V=V,
                               p_mask=float(kv["p_mask"]), label_noise=float(kv["delta"]))
