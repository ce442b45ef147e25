"""State spaces, local-rate models, exact and discretized simulation of
interacting jump processes on graphs, and path log-densities.

States are dense integer vectors in {0..V-1}^d. A rate field collects the
local jump intensities of every coordinate at one (t, z); its "diagonal"
column (the entry at the current value of each coordinate) holds the
negative exit rate of that coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import StepSizeError

S, I, R = 0, 1, 2  # SIRS state encoding


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class StateSpaceSpec:
    """Graph-structured product state space {0..V-1}^d."""

    d: int
    V: int
    adjacency: np.ndarray
    node_features: np.ndarray  # (d, F), F may be 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.V < 2:
            raise ValueError("V must be >= 2 (V=1 has no dynamics)")
        adj = np.asarray(self.adjacency)
        if adj.shape != (self.d, self.d):
            raise ValueError("adjacency must be d x d")
        if np.any(adj != adj.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(adj) != 0):
            raise ValueError("adjacency must have zero diagonal")
        feats = np.asarray(self.node_features, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != self.d:
            raise ValueError("node_features must be (d, F)")
        object.__setattr__(self, "adjacency", adj.astype(np.int8))
        object.__setattr__(self, "node_features", feats)

    @property
    def feature_dim(self):
        return self.node_features.shape[1]

    def neighbors(self, i):
        return np.flatnonzero(self.adjacency[i])

    def edge_weights(self):
        """Logistic feature inner products, masked by adjacency: (d, d)."""
        xi = self.node_features
        if xi.shape[1] == 0:
            inner = np.zeros((self.d, self.d))
        else:
            inner = xi @ xi.T
        return self.adjacency * sigmoid(inner)

    def validate_state(self, z):
        z = np.asarray(z)
        if z.shape != (self.d,):
            raise ValueError(f"state has shape {z.shape}, expected ({self.d},)")
        if np.any(z < 0) or np.any(z >= self.V):
            raise ValueError("state entries must lie in [0, V)")
        return z.astype(np.int64)


@dataclass(frozen=True)
class RateField:
    """d x V table of local rates at one (t, z).

    rates[i, v] = jump intensity of coordinate i to value v (v != z_i);
    rates[i, z_i] = negative sum of the other entries of row i.
    """

    rates: np.ndarray

    @classmethod
    def from_off_rates(cls, off, z):
        """Build from nonnegative off-target rates; zeroes the target column
        and fills the diagonal convention entry."""
        off = np.array(off, dtype=float)
        d = off.shape[0]
        idx = np.arange(d)
        off[idx, z] = 0.0
        if np.any(off < 0) or not np.all(np.isfinite(off)):
            raise ValueError("off-target rates must be finite and >= 0")
        off[idx, z] = -off.sum(axis=1)
        return cls(off)

    def exit_rates(self, z):
        """Per-coordinate exit rates (nonnegative d-vector)."""
        return -self.rates[np.arange(len(z)), z]

    def validate(self, z, rtol=1e-12):
        d, _ = self.rates.shape
        idx = np.arange(d)
        diag = self.rates[idx, z]
        off = self.rates.copy()
        off[idx, z] = 0.0
        if np.any(off < 0):
            raise ValueError("off-target rates must be >= 0")
        if not np.all(np.isfinite(self.rates)):
            raise ValueError("rates must be finite")
        target = -off.sum(axis=1)
        scale = np.maximum(np.abs(target), 1.0)
        if np.any(np.abs(diag - target) > rtol * scale):
            raise ValueError("diagonal entry must equal negative row exit rate")


class TwistedRateField(RateField):
    """Rate field after a multiplicative score tilt (same invariants)."""


@dataclass
class PathSample:
    """Cadlag piecewise-constant trajectory: initial state plus ordered jumps."""

    horizon: float
    initial: np.ndarray
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jump_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    jump_values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    t0: float = 0.0

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.int64)
        self.jump_times = np.asarray(self.jump_times, dtype=float)
        self.jump_nodes = np.asarray(self.jump_nodes, dtype=np.int64)
        self.jump_values = np.asarray(self.jump_values, dtype=np.int64)

    def validate(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        t = self.jump_times
        if len(t) and (t[0] <= self.t0 or t[-1] >= self.horizon):
            raise ValueError("jump times must lie in (t0, horizon)")
        if np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        z = self.initial.copy()
        for n in range(len(t)):
            i, v = self.jump_nodes[n], self.jump_values[n]
            if v == z[i]:
                raise ValueError(f"jump {n} does not change coordinate {i}")
            z[i] = v

    @property
    def n_jumps(self):
        return len(self.jump_times)

    def state_at(self, t):
        """State at time t (jumps at times <= t applied)."""
        z = self.initial.copy()
        for n in range(len(self.jump_times)):
            if self.jump_times[n] > t:
                break
            z[self.jump_nodes[n]] = self.jump_values[n]
        return z

    def states_at(self, grid):
        """States at each time of a sorted grid: (len(grid), d)."""
        grid = np.asarray(grid, dtype=float)
        out = np.empty((len(grid), len(self.initial)), dtype=np.int64)
        z = self.initial.copy()
        n = 0
        for m, t in enumerate(grid):
            while n < len(self.jump_times) and self.jump_times[n] <= t:
                z[self.jump_nodes[n]] = self.jump_values[n]
                n += 1
            out[m] = z
        return out


@dataclass(frozen=True)
class RateModel:
    """A local-rate model: pure function (t, z, spec, theta) -> RateField.

    lambda_bar_fn bounds the total exit rate (assumption: bounded total
    rate); coord_bound_fn bounds the per-coordinate exit rate and fixes the
    largest admissible Euler step 1/coord_bound. rate_grad_fn, when present,
    returns d rates / d theta as a (d, V, P) array of off-target entries.
    """

    rate_fn: Callable[[float, np.ndarray, StateSpaceSpec, Any], RateField]
    lambda_bar_fn: Callable[[StateSpaceSpec, Any], float] | None = None
    coord_bound_fn: Callable[[StateSpaceSpec, Any], float] | None = None
    time_homogeneous: bool = True
    rate_grad_fn: Callable | None = None
    batch_off_rate_fn: Callable | None = None  # (t, Z, spec, theta) -> (B, d, V)

    def rates(self, t, z, spec, theta):
        return self.rate_fn(t, z, spec, theta)

    def off_rates_batch(self, t, Z, spec, theta):
        """Nonnegative off-target rates for a batch of states: (B, d, V)."""
        if self.batch_off_rate_fn is not None:
            return self.batch_off_rate_fn(t, Z, spec, theta)
        B, d = Z.shape
        out = np.empty((B, d, spec.V))
        idx = np.arange(d)
        for b in range(B):
            rf = self.rate_fn(t, Z[b], spec, theta).rates.copy()
            rf[idx, Z[b]] = 0.0
            out[b] = rf
        return out

    def lambda_bar(self, spec, theta):
        if self.lambda_bar_fn is None:
            raise ValueError("model does not declare a total-rate bound")
        return self.lambda_bar_fn(spec, theta)

    def max_step(self, spec, theta):
        """Largest Delta t satisfying the small-interval assumption."""
        if self.coord_bound_fn is None:
            return None
        bound = self.coord_bound_fn(spec, theta)
        return math.inf if bound == 0 else 1.0 / bound


@dataclass(frozen=True)
class SIRSParams:
    alpha0: float
    alpha1: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha0", "alpha1", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def as_array(self):
        return np.array([self.alpha0, self.alpha1, self.beta, self.gamma])

    @classmethod
    def from_array(cls, a):
        return cls(*(float(x) for x in a))


def sirs_infection_pressure(spec, Z):
    """alpha1 multiplier per node: sum over infected neighbors of the edge
    weight. Z is (B, d); returns (B, d)."""
    W = spec.edge_weights()
    return (Z == I).astype(float) @ W.T


def sirs_off_rates_batch(t, Z, spec, params):
    B, d = Z.shape
    w = sirs_infection_pressure(spec, Z)
    off = np.zeros((B, d, spec.V))
    off[:, :, I] = (params.alpha0 + params.alpha1 * w) * (Z == S)
    off[:, :, R] = params.beta * (Z == I)
    off[:, :, S] = params.gamma * (Z == R)
    return off


def sirs_rate_field(t, z, spec, params):
    """Cyclic S -> I -> R -> S local rates with graph-weighted infection."""
    z = spec.validate_state(z)
    if spec.V != 3:
        raise ValueError("SIRS requires V = 3")
    off = sirs_off_rates_batch(t, z[None, :], spec, params)[0]
    return RateField.from_off_rates(off, z)


def sirs_rate_grad(t, z, spec, params):
    """d r_i(v|z) / d (alpha0, alpha1, beta, gamma): (d, V, 4) off-target."""
    z = np.asarray(z)
    d = spec.d
    w = sirs_infection_pressure(spec, z[None, :])[0]
    g = np.zeros((d, spec.V, 4))
    sus = z == S
    g[:, I, 0] = sus
    g[:, I, 1] = w * sus
    g[:, R, 2] = (z == I).astype(float)
    g[:, S, 3] = (z == R).astype(float)
    return g


def sirs_model():
    def lam(spec, p):
        wmax = sirs_infection_pressure(spec, np.full((1, spec.d), I))[0].max()
        return spec.d * max(p.alpha0 + p.alpha1 * wmax, p.beta, p.gamma)

    def coord(spec, p):
        wmax = sirs_infection_pressure(spec, np.full((1, spec.d), I))[0].max()
        return max(p.alpha0 + p.alpha1 * wmax, p.beta, p.gamma)

    return RateModel(
        rate_fn=sirs_rate_field,
        lambda_bar_fn=lam,
        coord_bound_fn=coord,
        time_homogeneous=True,
        rate_grad_fn=sirs_rate_grad,
        batch_off_rate_fn=sirs_off_rates_batch,
    )


def total_exit_rate(rf: RateField) -> float:
    """Sum of all off-target entries (equals minus the trace column sum)."""
    rates = rf.rates
    return float(rates[rates > 0].sum())


def _step_probs(rates, z, dt):
    """Per-coordinate categorical table delta + dt * r; raises if any stay
    probability would be negative."""
    d = rates.shape[0]
    probs = dt * rates
    probs[np.arange(d), z] += 1.0
    stay = probs[np.arange(d), z]
    if np.any(stay < 0):
        worst = float(stay.min())
        raise StepSizeError(
            f"Euler step {dt} violates the small-interval bound "
            f"(stay probability {worst:.3g}); shrink the step"
        )
    return probs


def euler_kernel_sample(rf: RateField, z, dt, rng) -> np.ndarray:
    """One product-kernel step: each coordinate drawn independently from
    delta + dt * r. Multi-coordinate flips are possible by construction."""
    z = np.asarray(z)
    probs = _step_probs(rf.rates, z, dt)
    u = rng.random(len(z))
    cum = np.cumsum(probs, axis=1)
    return (u[:, None] < cum).argmax(axis=1).astype(np.int64)


def euler_kernel_log_pmf(rf: RateField, z, z_next, dt) -> float:
    z = np.asarray(z)
    z_next = np.asarray(z_next)
    probs = _step_probs(rf.rates, z, dt)
    p = probs[np.arange(len(z)), z_next]
    if np.any(p <= 0):
        if np.any(p < 0):
            raise StepSizeError("Euler step too large: negative probability")
        return -np.inf
    return float(np.log(p).sum())


def euler_simulate_batch(model, spec, theta, Z0, grid, rng):
    """Euler-discretized prior paths for a batch: (B, M+1, d) states on grid.

    Coordinates are sampled independently per step via inverse-cdf on the
    batched off-rate table.
    """
    grid = np.asarray(grid, dtype=float)
    Z0 = np.asarray(Z0, dtype=np.int64)
    B, d = Z0.shape
    M = len(grid) - 1
    out = np.empty((B, M + 1, d), dtype=np.int64)
    out[:, 0] = Z0
    Z = Z0.copy()
    rows = np.arange(B)[:, None], np.arange(d)[None, :]
    for m in range(M):
        dt = grid[m + 1] - grid[m]
        off = model.off_rates_batch(grid[m], Z, spec, theta)
        probs = dt * off
        probs[rows[0], rows[1], Z] += 1.0 - dt * off.sum(axis=2)
        if np.any(probs[rows[0], rows[1], Z] < 0):
            raise StepSizeError(f"Euler step {dt} too large at grid index {m}")
        u = rng.random((B, d, 1))
        Z = (u < np.cumsum(probs, axis=2)).argmax(axis=2).astype(np.int64)
        out[:, m + 1] = Z
    return out


def gillespie_simulate(model, spec, theta, z0, T, rng) -> PathSample:
    """Statistically exact event-driven path on [0, T].

    Time-homogeneous models use the classic next-event recipe. Otherwise
    candidate events arrive at the declared total-rate bound and are
    accepted by thinning, so the bound is required.
    """
    z = spec.validate_state(z0).copy()
    times, nodes, values = [], [], []
    t = 0.0
    if model.time_homogeneous:
        rf = model.rates(t, z, spec, theta)
        while True:
            lam = total_exit_rate(rf)
            if lam <= 0:
                break
            t += rng.exponential(1.0 / lam)
            if t >= T:
                break
            i, v = _draw_event(rf, z, rng)
            z[i] = v
            times.append(t)
            nodes.append(i)
            values.append(v)
            rf = model.rates(t, z, spec, theta)
    else:
        lam_bar = model.lambda_bar(spec, theta)
        if not np.isfinite(lam_bar) or lam_bar < 0:
            raise ValueError("thinning requires a finite total-rate bound")
        if lam_bar > 0:
            while True:
                t += rng.exponential(1.0 / lam_bar)
                if t >= T:
                    break
                rf = model.rates(t, z, spec, theta)
                lam = total_exit_rate(rf)
                if lam > lam_bar * (1 + 1e-9):
                    raise ValueError(
                        f"declared rate bound {lam_bar} violated at t={t} (rate {lam})"
                    )
                if rng.random() < lam / lam_bar:
                    i, v = _draw_event(rf, z, rng)
                    z[i] = v
                    times.append(t)
                    nodes.append(i)
                    values.append(v)
    return PathSample(horizon=T, initial=spec.validate_state(z0),
                      jump_times=np.array(times), jump_nodes=np.array(nodes, dtype=np.int64),
                      jump_values=np.array(values, dtype=np.int64))


def _draw_event(rf, z, rng):
    """Pick (node, value) proportional to off-target rates; index ties are
    impossible a.s. and resolve by flat order."""
    d, V = rf.rates.shape
    off = rf.rates.copy()
    off[np.arange(d), z] = 0.0
    flat = off.ravel()
    c = np.cumsum(flat)
    k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    k = min(k, d * V - 1)
    return k // V, k % V


def path_log_density(model, spec, theta, path: PathSample, p0_log, quad_step=None):
    """Log-density of a path: initial mass, jump intensities, and the
    survival integral of the exit rate.

    Time-homogeneous models integrate exactly between jumps; otherwise the
    integral uses midpoint quadrature at quad_step.
    """
    path.validate()
    z = path.initial.copy()
    total = float(p0_log(z))
    seg_starts = np.concatenate([[path.t0], path.jump_times])
    seg_ends = np.concatenate([path.jump_times, [path.horizon]])
    for n in range(len(seg_starts)):
        a, b = seg_starts[n], seg_ends[n]
        if model.time_homogeneous:
            rf = model.rates(a, z, spec, theta)
            total -= total_exit_rate(rf) * (b - a)
        else:
            if quad_step is None:
                raise ValueError("inhomogeneous model needs a quadrature step")
            k = max(1, int(np.ceil((b - a) / quad_step)))
            ts = a + (np.arange(k) + 0.5) * (b - a) / k
            acc = sum(total_exit_rate(model.rates(t, z, spec, theta)) for t in ts)
            total -= acc * (b - a) / k
        if n < path.n_jumps:
            tj = path.jump_times[n]
            i, v = path.jump_nodes[n], path.jump_values[n]
            r = model.rates(tj, z, spec, theta).rates[i, v]
            if r <= 0:
                import warnings

                warnings.warn(f"jump {n} at t={tj} has zero rate under the model")
                return -np.inf
            total += float(np.log(r))
            z[i] = v
    return total


def rng_streams(seed, n):
    """Independent per-path generators from a counter-split seed sequence."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(c) for c in ss.spawn(n)]


def make_grid(T, dt, obs_times=()):
    """Uniform grid of step dt on [0, T], merged with the observation times.

    Points closer than 1e-12 are collapsed so steps stay positive.
    """
    n = max(1, int(round(T / dt)))
    base = np.linspace(0.0, T, n + 1)
    grid = np.union1d(base, np.asarray(obs_times, dtype=float))
    if grid[0] < 0 or grid[-1] > T + 1e-12:
        raise ValueError("observation times must lie in [0, T]")
    keep = np.concatenate([[True], np.diff(grid) > 1e-12])
    grid = grid[keep]
    grid[-1] = T
    return grid


def write_path(f, path: PathSample, V):
    z0 = ",".join(str(int(x)) for x in path.initial)
    f.write(f"T={float(path.horizon)!r} d={len(path.initial)} V={V} z0={z0}\n")
    for n in range(path.n_jumps):
        f.write(f"{float(path.jump_times[n])!r},{int(path.jump_nodes[n])},{int(path.jump_values[n])}\n")


def read_path(f):
    header = f.readline().strip().split()
    kv = dict(tok.split("=", 1) for tok in header)
    T = float(kv["T"])
    d = int(kv["d"])
    V = int(kv["V"])
    z0 = np.array([int(x) for x in kv["z0"].split(",")], dtype=np.int64)
    if len(z0) != d:
        raise ValueError("initial state length does not match d")
    times, nodes, values = [], [], []
    for line in f:
        line = line.strip()
        if not line:
            continue
        t, i, v = line.split(",")
        times.append(float(t))
        nodes.append(int(i))
        values.append(int(v))
    path = PathSample(horizon=T, initial=z0, jump_times=np.array(times),
                      jump_nodes=np.array(nodes, dtype=np.int64),
                      jump_values=np.array(values, dtype=np.int64))
    return path, V
