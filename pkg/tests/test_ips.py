import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from ipsmc.errors import StepSizeError
from ipsmc.ips import (PathSample, RateField, SIRSParams, StateSpaceSpec,
                       euler_kernel_log_pmf, euler_kernel_sample,
                       euler_simulate_batch, gillespie_simulate, make_grid,
                       path_log_density, read_path, sirs_model,
                       sirs_rate_field, total_exit_rate, write_path)
from ipsmc import oracle as orc

from conftest import chain_spec, make_flip_model


def test_spec_rejects_degenerate_vocabulary():
    with pytest.raises(ValueError):
        StateSpaceSpec(d=2, V=1, adjacency=np.zeros((2, 2), dtype=int),
                       node_features=np.zeros((2, 0)))


def test_spec_rejects_asymmetric_adjacency():
    adj = np.array([[0, 1], [0, 0]])
    with pytest.raises(ValueError):
        StateSpaceSpec(d=2, V=2, adjacency=adj, node_features=np.zeros((2, 0)))


def test_spec_rejects_self_loops():
    adj = np.array([[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        StateSpaceSpec(d=2, V=2, adjacency=adj, node_features=np.zeros((2, 0)))


@given(st.integers(1, 5), st.integers(2, 4), st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_rate_field_row_sum_invariant(d, V, seed):
    rng = np.random.default_rng(seed)
    off = rng.exponential(size=(d, V))
    z = rng.integers(V, size=d)
    rf = RateField.from_off_rates(off, z)
    rf.validate(z)
    exits = rf.exit_rates(z)
    assert np.all(exits >= 0)
    assert total_exit_rate(rf) == pytest.approx(exits.sum())


def test_rate_field_validate_catches_bad_diagonal():
    rf = RateField(np.array([[0.5, 0.1]]))
    with pytest.raises(ValueError):
        rf.validate(np.array([0]))


class TestSIRSRates:
    def test_all_susceptible_absorbing_without_spontaneous_rate(self, pair_spec):
        p = SIRSParams(0.0, 1.0, 0.4, 0.05)
        rf = sirs_rate_field(0.0, np.array([0, 0]), pair_spec, p)
        assert np.all(rf.rates == 0.0)

    def test_infected_node_recovery_rate(self, pair_spec):
        p = SIRSParams(0.0, 0.0, 0.4, 0.0)
        rf = sirs_rate_field(0.0, np.array([1, 0]), pair_spec, p)
        assert rf.rates[0, 2] == pytest.approx(0.4)
        assert rf.rates[0, 0] == 0.0
        assert rf.rates[0, 1] == pytest.approx(-0.4)

    def test_infection_rate_with_one_infected_neighbor(self, pair_spec):
        # zero-dim features make every edge weight exactly one half
        p = SIRSParams(0.1, 1.0, 0.4, 0.05)
        rf = sirs_rate_field(0.0, np.array([0, 1]), pair_spec, p)
        assert rf.rates[0, 1] == pytest.approx(0.1 + 1.0 * 0.5)

    def test_total_exit_rate_of_combined_example(self, pair_spec):
        p = SIRSParams(0.1, 1.0, 0.4, 0.05)
        rf = sirs_rate_field(0.0, np.array([0, 1]), pair_spec, p)
        assert total_exit_rate(rf) == pytest.approx(1.0)

    def test_dimension_mismatch_rejected(self, pair_spec):
        with pytest.raises(ValueError):
            sirs_rate_field(0.0, np.array([0, 1, 2]), pair_spec,
                            SIRSParams(0.1, 1.0, 0.4, 0.05))


def test_total_exit_rate_zero_field():
    rf = RateField.from_off_rates(np.zeros((2, 2)), np.array([0, 0]))
    assert total_exit_rate(rf) == 0.0


def test_total_exit_rate_two_nodes():
    off = np.zeros((2, 2))
    off[0, 1] = 0.4
    off[1, 0] = 0.4
    rf = RateField.from_off_rates(off, np.array([0, 1]))
    assert total_exit_rate(rf) == pytest.approx(0.8)


class TestEulerKernel:
    def test_zero_rates_identity(self):
        rf = RateField.from_off_rates(np.zeros((3, 2)), np.array([0, 1, 0]))
        rng = np.random.default_rng(0)
        z = np.array([0, 1, 0])
        for dt in (0.01, 0.5, 10.0):
            assert np.array_equal(euler_kernel_sample(rf, z, dt, rng), z)

    def test_single_flip_probability(self):
        off = np.array([[0.0, 0.5]])
        rf = RateField.from_off_rates(off, np.array([0]))
        lp_flip = euler_kernel_log_pmf(rf, np.array([0]), np.array([1]), 0.1)
        lp_stay = euler_kernel_log_pmf(rf, np.array([0]), np.array([0]), 0.1)
        assert lp_flip == pytest.approx(math.log(0.05))
        assert lp_stay == pytest.approx(math.log(0.95))

    def test_joint_flip_probability_is_product(self):
        off = np.zeros((2, 2))
        off[0, 1] = 1.0
        off[1, 0] = 1.0
        z = np.array([0, 1])
        rf = RateField.from_off_rates(off, z)
        lp = euler_kernel_log_pmf(rf, z, np.array([1, 0]), 0.1)
        assert lp == pytest.approx(math.log(0.01))

    def test_pmf_normalizes_over_state_space(self):
        spec = chain_spec(3, V=2)
        model = make_flip_model(0.7, 0.5, coupling=0.4)
        z = np.array([0, 1, 0])
        rf = model.rates(0.0, z, spec, None)
        table = orc.state_table(spec)
        total = sum(math.exp(euler_kernel_log_pmf(rf, z, zn, 0.2)) for zn in table)
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_step_size_error(self):
        off = np.array([[0.0, 3.0]])
        rf = RateField.from_off_rates(off, np.array([0]))
        with pytest.raises(StepSizeError):
            euler_kernel_sample(rf, np.array([0]), 0.5, np.random.default_rng(0))
        with pytest.raises(StepSizeError):
            euler_kernel_log_pmf(rf, np.array([0]), np.array([1]), 0.5)

    @given(st.integers(1, 4), st.integers(2, 4), st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_pmf_normalizes_on_random_spaces(self, d, V, seed):
        rng = np.random.default_rng(seed)
        off = rng.exponential(size=(d, V))
        z = rng.integers(V, size=d)
        rf = RateField.from_off_rates(off, z)
        dt = 0.9 / max(rf.exit_rates(z).max(), 1e-9)
        spec = chain_spec(d, V=V)
        table = orc.state_table(spec)
        total = sum(math.exp(euler_kernel_log_pmf(rf, z, zn, dt))
                    for zn in table)
        assert abs(total - 1.0) < 1e-10


def test_euler_tv_error_halves_like_squared_step():
    # second-order kernel accuracy: TV against exp(Q dt) shrinks ~4x per halving
    spec = chain_spec(3, V=2)
    model = make_flip_model(0.5, 0.7, coupling=0.6)
    gen = orc.build_dense_generator(model, spec, None)
    table = orc.state_table(spec)

    def max_tv(dt):
        P = orc.transition_matrix(gen, dt)
        worst = 0.0
        for s, z in enumerate(table):
            rf = model.rates(0.0, z, spec, None)
            q = np.array([math.exp(euler_kernel_log_pmf(rf, z, zn, dt))
                          for zn in table])
            worst = max(worst, 0.5 * np.abs(q - P[s]).sum())
        return worst

    ratio = max_tv(0.2) / max_tv(0.1)
    assert 2.5 <= ratio <= 6.0


class TestGillespie:
    def test_zero_rate_model_empty_path(self):
        spec = chain_spec(2, V=2)
        model = make_flip_model(0.0, 0.0)
        path = gillespie_simulate(model, spec, None, np.array([0, 1]), 5.0,
                                  np.random.default_rng(0))
        assert path.n_jumps == 0

    def test_jump_count_matches_poisson_law(self):
        spec = chain_spec(1, V=2)
        model = make_flip_model(1.0, 1.0)
        rng = np.random.default_rng(42)
        counts = [gillespie_simulate(model, spec, None, np.array([0]), 10.0,
                                     rng).n_jumps for _ in range(10_000)]
        mean = np.mean(counts)
        band = 3.0 * math.sqrt(10.0 / 10_000)
        assert abs(mean - 10.0) < band

    def test_sirs_absorbing_state(self, pair_spec):
        p = SIRSParams(0.0, 1.0, 0.4, 0.05)
        path = gillespie_simulate(sirs_model(), pair_spec, p, np.array([0, 0]),
                                  50.0, np.random.default_rng(1))
        assert path.n_jumps == 0

    def test_inhomogeneous_requires_bound(self):
        spec = chain_spec(1, V=2)
        base = make_flip_model(1.0, 1.0)
        from ipsmc.ips import RateModel

        model = RateModel(rate_fn=base.rate_fn, time_homogeneous=False)
        with pytest.raises(ValueError):
            gillespie_simulate(model, spec, None, np.array([0]), 1.0,
                               np.random.default_rng(0))


class TestPathLogDensity:
    def _point_mass(self, z0):
        def p0_log(z):
            return 0.0 if np.array_equal(z, z0) else -np.inf

        return p0_log

    def test_no_jump_constant_exit(self):
        spec = chain_spec(1, V=2)
        model = make_flip_model(1.0, 1.0)
        path = PathSample(horizon=2.0, initial=np.array([0]))
        val = path_log_density(model, spec, None, path, self._point_mass([0]))
        assert val == pytest.approx(-2.0)

    def test_single_jump(self):
        spec = chain_spec(1, V=2)
        model = make_flip_model(0.5, 0.5)
        path = PathSample(horizon=2.0, initial=np.array([0]),
                          jump_times=np.array([1.0]),
                          jump_nodes=np.array([0]), jump_values=np.array([1]))
        val = path_log_density(model, spec, None, path, self._point_mass([0]))
        assert val == pytest.approx(math.log(0.5) - 1.0)

    def test_zero_rate_jump_gives_minus_inf(self):
        spec = chain_spec(2, V=3)
        p = SIRSParams(0.0, 0.0, 0.4, 0.0)
        path = PathSample(horizon=1.0, initial=np.array([0, 0]),
                          jump_times=np.array([0.5]),
                          jump_nodes=np.array([0]), jump_values=np.array([1]))
        with pytest.warns(UserWarning):
            val = path_log_density(sirs_model(), spec, p, path,
                                   self._point_mass([0, 0]))
        assert val == -np.inf

    def test_truncated_path_enumeration_matches_matrix_exponential(self, pair_spec):
        # quadrature over <=2 jump paths vs the exact kernel; the residual
        # >=3 jump mass is below the tolerance at this horizon
        p = SIRSParams(0.4, 1.0, 0.6, 0.3)
        model = sirs_model()
        T = 0.25
        z0 = np.array([0, 1])
        gen = orc.build_dense_generator(model, pair_spec, p)
        P = expm(gen.Q * T)

        def density(path):
            return math.exp(path_log_density(model, pair_spec, p, path,
                                             self._point_mass(z0)))

        # 0 jumps
        total = {orc.state_index(pair_spec, z0): density(
            PathSample(horizon=T, initial=z0))}
        # enumerate single-coordinate moves with positive rates
        moves = []
        rf0 = model.rates(0.0, z0, pair_spec, p)
        for i in range(2):
            for v in range(3):
                if v != z0[i] and rf0.rates[i, v] > 0:
                    moves.append((i, v))
        nq = 48
        ts, w = np.polynomial.legendre.leggauss(nq)
        for i, v in moves:
            # 1 jump
            z1 = z0.copy()
            z1[i] = v
            t1s = 0.5 * T * (ts + 1)
            mass = sum(wt * density(PathSample(horizon=T, initial=z0,
                                               jump_times=np.array([t]),
                                               jump_nodes=np.array([i]),
                                               jump_values=np.array([v])))
                       for t, wt in zip(t1s, w)) * 0.5 * T
            key = orc.state_index(pair_spec, z1)
            total[key] = total.get(key, 0.0) + mass
            # 2 jumps
            rf1 = model.rates(0.0, z1, pair_spec, p)
            for i2 in range(2):
                for v2 in range(3):
                    if v2 != z1[i2] and rf1.rates[i2, v2] > 0:
                        z2 = z1.copy()
                        z2[i2] = v2
                        acc = 0.0
                        for t1, w1 in zip(0.5 * T * (ts + 1), w):
                            inner = 0.0
                            for t2r, w2 in zip(ts, w):
                                t2 = t1 + 0.5 * (T - t1) * (t2r + 1)
                                inner += w2 * density(PathSample(
                                    horizon=T, initial=z0,
                                    jump_times=np.array([t1, t2]),
                                    jump_nodes=np.array([i, i2]),
                                    jump_values=np.array([v, v2])))
                            acc += w1 * inner * 0.5 * (T - t1)
                        acc *= 0.5 * T
                        key = orc.state_index(pair_spec, z2)
                        total[key] = total.get(key, 0.0) + acc
        s0 = orc.state_index(pair_spec, z0)
        for key, val in total.items():
            assert val == pytest.approx(P[s0, key], abs=1e-3)


def test_gillespie_and_euler_agree_on_terminal_marginals(pair_spec):
    p = SIRSParams(0.3, 1.0, 0.5, 0.3)
    model = sirs_model()
    T, n = 2.0, 10_000
    rng = np.random.default_rng(11)
    z0 = np.array([0, 1])
    counts_g = np.zeros(9)
    for _ in range(n):
        path = gillespie_simulate(model, pair_spec, p, z0, T, rng)
        counts_g[orc.state_index(pair_spec, path.state_at(T))] += 1
    grid = make_grid(T, 0.01)
    Z0 = np.tile(z0, (n, 1))
    states = euler_simulate_batch(model, pair_spec, p, Z0, grid, rng)
    final = states[:, -1, :]
    idx = final[:, 0] + 3 * final[:, 1]
    counts_e = np.bincount(idx, minlength=9)
    tv = 0.5 * np.abs(counts_g / n - counts_e / n).sum()
    assert tv < 0.02


def test_path_serialization_round_trip():
    path = PathSample(horizon=3.5, initial=np.array([0, 2, 1]),
                      jump_times=np.array([0.25, 1.75]),
                      jump_nodes=np.array([1, 0]),
                      jump_values=np.array([0, 1]))
    buf = io.StringIO()
    write_path(buf, path, V=3)
    buf.seek(0)
    back, V = read_path(buf)
    assert V == 3
    assert back.horizon == path.horizon
    assert np.array_equal(back.initial, path.initial)
    assert np.array_equal(back.jump_times, path.jump_times)
    assert np.array_equal(back.jump_nodes, path.jump_nodes)
    assert np.array_equal(back.jump_values, path.jump_values)


def test_path_validation():
    bad = PathSample(horizon=1.0, initial=np.array([0]),
                     jump_times=np.array([0.5, 0.5]),
                     jump_nodes=np.array([0, 0]), jump_values=np.array([1, 0]))
    with pytest.raises(ValueError):
        bad.validate()


def test_make_grid_contains_observation_times():
    grid = make_grid(10.0, 0.3, [0.17, 5.551, 9.99])
    for tau in (0.17, 5.551, 9.99):
        assert np.any(np.abs(grid - tau) < 1e-12)
    assert grid[0] == 0.0 and grid[-1] == 10.0
    assert np.all(np.diff(grid) > 0)
