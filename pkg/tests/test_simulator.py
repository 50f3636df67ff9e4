import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import binary_path_law, chi2_pvalue, geometric_survival
from psdbp import offspring as om
from psdbp import qprocess as qp
from psdbp import simulator as sim
from psdbp.offspring import OffspringSpec


class TestTrajectory:
    def test_absorption_enforced(self):
        with pytest.raises(ValueError, match="absorption"):
            sim.Trajectory([3, 0, 2])

    def test_z0_positive(self):
        with pytest.raises(ValueError):
            sim.Trajectory([0, 0])

    def test_equality_by_states(self):
        assert sim.Trajectory([2, 3, 0]) == sim.Trajectory(np.array([2, 3, 0]), seed=7)
        assert sim.Trajectory([2, 3]).n == 1

    def test_tree_identities(self):
        t = sim.TreeSample(3, ({0: 1, 2: 2}, {0: 2, 2: 2}))
        np.testing.assert_array_equal(t.states, [3, 4, 4])
        with pytest.raises(ValueError, match="sum_k"):
            sim.TreeSample(3, ({0: 1, 2: 1},))


class TestSimulate:
    @settings(max_examples=30, deadline=None)
    @given(fam=st.sampled_from(["geometric", "poisson", "two_point_binary"]),
           m=st.floats(0.3, 1.5), z0=st.integers(1, 20), n=st.integers(0, 30),
           seed=st.integers(0, 2**32))
    def test_absorbing_and_reproducible(self, fam, m, z0, n, seed):
        s = OffspringSpec.constant(fam, m)
        a = sim.simulate(s, z0, n, seed)
        b = sim.simulate(s, z0, n, seed)
        assert a == b
        assert a.n == n and a.states[0] == z0
        dead = np.flatnonzero(a.states == 0)
        if dead.size:
            assert np.all(a.states[dead[0]:] == 0)

    def test_zero_horizon(self):
        t = sim.simulate(OffspringSpec.constant("poisson", 0.9), 5, 0, 1)
        np.testing.assert_array_equal(t.states, [5])

    def test_rejects_zero_start(self):
        with pytest.raises(ValueError):
            sim.simulate(OffspringSpec.constant("poisson", 0.9), 0, 5, 1)

    def test_binary_sizes_even(self):
        t = sim.simulate(OffspringSpec.ricker("two_point_binary", 1.2, 30), 30, 200, 3)
        assert np.all(t.states[1:] % 2 == 0)

    def test_one_step_survival_geometric(self):
        s = OffspringSpec.constant("geometric", 0.8)
        N = 40000
        alive = sum(sim.simulate(s, 1, 1, (11, i)).states[1] > 0 for i in range(N))
        se = math.sqrt(4 / 9 * 5 / 9 / N)
        assert abs(alive / N - 4 / 9) < 4 * se

    @pytest.mark.parametrize("z", [8, 28, 60])
    def test_one_step_mean_and_variance(self, z):
        s = OffspringSpec.ricker("poisson", 1.2, 30)
        g = np.random.default_rng(z)
        x = np.array([sim.simulate(s, z, 1, rng=g).states[1] for _ in range(20000)], float)
        mean, var = z * om.mean(s, z), z * om.variance(s, z)
        assert abs(x.mean() - mean) < 4 * math.sqrt(var / x.size)
        assert x.var() == pytest.approx(var, rel=0.05)

    def test_explicit_law_runs(self):
        s = OffspringSpec("explicit_pmf", pmf_table=[(0, 0.5), (1, 0.2), (3, 0.3)])
        t = sim.simulate(s, 4, 20, 5)
        assert t.n == 20

    def test_trajectory_rng_order_free(self):
        a = sim.trajectory_rng(9, 3).random(4)
        sim.trajectory_rng(9, 2).random(4)
        np.testing.assert_array_equal(a, sim.trajectory_rng(9, 3).random(4))
        assert not np.array_equal(a, sim.trajectory_rng(9, 4).random(4))


class TestTree:
    def test_tree_matches_trajectory_sizes(self):
        s = OffspringSpec.constant("poisson", 1.1)
        t = sim.simulate_tree(s, 5, 15, 4)
        assert t.n == 15
        for i, tally in enumerate(t.counts):
            assert sum(tally.values()) == t.states[i]
            assert sum(k * c for k, c in tally.items()) == t.states[i + 1]

    def test_binary_tree_counts(self):
        s = OffspringSpec.constant("two_point_binary", 0.9)
        t = sim.simulate_tree(s, 6, 10, 2)
        for i, tally in enumerate(t.counts):
            assert set(tally) <= {0, 2}
            assert 2 * tally.get(2, 0) == t.states[i + 1]

    def test_csv_round_trip(self):
        s = OffspringSpec.constant("poisson", 1.1)
        trs = [sim.simulate(s, 3, 8, (1, i)) for i in range(5)]
        back = sim.trajectories_from_csv(sim.trajectories_to_csv(trs))
        assert back == trs
        assert sim.trees_to_csv([sim.simulate_tree(s, 3, 4, 1)]).startswith("trajectory_id,generation,k,count")


class TestSurvival:
    @pytest.mark.parametrize("s", [1, 5, 20, 200])
    @pytest.mark.parametrize("i", [1, 3])
    def test_geometric_closed_form(self, s, i):
        spec = OffspringSpec.constant("geometric", 0.8)
        assert sim.survival_probability(spec, i, s) == pytest.approx(geometric_survival(0.8, s, i), rel=1e-12)

    def test_kernel_path_agrees(self, geom_qp):
        kernel, _ = geom_qp
        spec = OffspringSpec.constant("geometric", 0.8)
        for s in (1, 4, 12):
            assert sim.survival_probability(spec, 2, s, kernel) == pytest.approx(
                geometric_survival(0.8, s, 2), rel=1e-9)

    def test_monte_carlo(self):
        spec = OffspringSpec.constant("poisson", 0.9)
        N = 20000
        alive = sum(sim.simulate(spec, 2, 6, (3, i)).survived for i in range(N))
        p = sim.survival_probability(spec, 2, 6)
        assert abs(alive / N - p) < 4 * math.sqrt(p * (1 - p) / N)

    def test_size_dependent_needs_kernel(self):
        with pytest.raises(ValueError):
            sim.survival_probability(OffspringSpec.ricker("poisson", 1.2, 30), 3, 4)


P2 = 0.4
CONST = OffspringSpec.constant("two_point_binary", 2 * P2)


def _paths(trs):
    return [tuple(t.states.tolist()) for t in trs]


class TestConditioned:
    def test_splitting_single_block_exact(self):
        # supercritical start: 2 P(Z_n > 0) >= 1 for the whole horizon, so one block
        spec = OffspringSpec.constant("two_point_binary", 1.4)
        assert sim.splitting_block_length(spec, 3, 4) == 4
        law = binary_path_law(lambda z: 0.7, 3, 4)
        g = np.random.default_rng(0)
        trs = [sim.simulate_conditioned_splitting(spec, 3, 4, rng=g) for _ in range(20000)]
        assert chi2_pvalue(_paths(trs), law) > 1e-3

    def test_splitting_survives(self):
        g = np.random.default_rng(1)
        for _ in range(50):
            assert sim.simulate_conditioned_splitting(CONST, 2, 12, rng=g).survived

    def test_splitting_needs_positive_horizon(self):
        with pytest.raises(ValueError):
            sim.simulate_conditioned_splitting(CONST, 2, 0, 1)

    @pytest.fixture(scope="class")
    @staticmethod
    def const_qp():
        k = qp.build_kernel(CONST, 60)
        return k, qp.spectral(k, tol=1e-14)

    @pytest.mark.parametrize("z0,n", [(1, 3), (3, 4), (2, 6)])
    def test_hybrid_exact_tail_matches_enumeration(self, const_qp, z0, n):
        kernel, triple = const_qp
        sampler = sim.HybridSampler(kernel, triple, n)
        assert sampler.error_bound(n) == 0.0
        g = np.random.default_rng(z0 * 10 + n)
        trs = [sampler.sample(z0, n, rng=g) for _ in range(20000)]
        assert chi2_pvalue(_paths(trs), binary_path_law(lambda z: P2, z0, n)) > 1e-3

    def test_hybrid_bound_is_coupling_error(self, geom_qp):
        kernel, triple = geom_qp
        traj, bound = sim.simulate_conditioned_hybrid(
            OffspringSpec.constant("geometric", 0.8), kernel, triple, 2, 80, 50, seed=3)
        assert traj.survived and traj.n == 80
        assert bound == pytest.approx(3.4481e-6, abs=5e-10)

    def test_hybrid_rejects_k_above_n(self, const_qp):
        kernel, triple = const_qp
        with pytest.raises(ValueError):
            sim.simulate_conditioned_hybrid(CONST, kernel, triple, 1, 5, 6, seed=1)

    def test_hybrid_rejects_foreign_kernel(self, const_qp):
        kernel, triple = const_qp
        with pytest.raises(ValueError, match="different"):
            sim.simulate_conditioned_hybrid(OffspringSpec.constant("poisson", 0.8),
                                            kernel, triple, 1, 5, 3, seed=1)

    def test_hybrid_reproducible(self, ricker_qp):
        kernel, triple = ricker_qp
        s = sim.HybridSampler(kernel, triple, 20)
        assert s.sample(30, 60, (5, 2)) == s.sample(30, 60, (5, 2))
        assert s.sample(30, 60, (5, 2)).states[-1] > 0
