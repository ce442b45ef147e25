"""Shared oracle-backed helpers for unit and acceptance tests."""

import math

import numpy as np

from ipsmc.ips import make_grid
from ipsmc import oracle as orc
from ipsmc.twisting import (ExactTwist, incremental_ess, twist_rate_field,
                            twisted_kernel_log_pmf)


def exact_twist_ess_values(spec, model, theta, obs, dt, times=None):
    """Enumerated one-step ESS of the tilted Euler proposal against the
    exact twisted target (true kernel times look-ahead times potential),
    over all states and the requested grid steps."""
    grid = make_grid(obs.horizon, dt, obs.times)
    pots = orc.potential_vectors(spec, obs)
    la = orc.exact_lookahead(model, spec, theta, pots, grid)
    twist = ExactTwist(la, spec)
    gen = la.gen
    table = orc.state_table(spec)
    pot_idx = {int(np.argmin(np.abs(grid - t))): np.asarray(v) for t, v in pots}
    if times is None:
        times = range(len(grid) - 1)
    vals = []
    for m in times:
        t, t1 = grid[m], grid[m + 1]
        P = orc.transition_matrix(gen, t1 - t)
        tilt = la.log_h[m + 1].copy()
        if m + 1 in pot_idx:
            tilt = tilt + pot_idx[m + 1]
        for s, z in enumerate(table):
            base = model.rates(t, z, spec, theta)
            tilted = twist_rate_field(base, twist.score_table(t, z), z)
            q = np.array([math.exp(twisted_kernel_log_pmf(tilted, z, zn, t1 - t))
                          for zn in table])
            target = P[s] * np.exp(tilt - tilt.max())
            target /= target.sum()
            vals.append(incremental_ess(q, target))
    return np.array(vals)
