import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from psdbp import offspring as om
from psdbp import qprocess as qp
from psdbp.offspring import OffspringSpec

import oracles


def _toy():
    Q, rho, u, v = oracles.two_state_oracle()
    kernel = qp.TruncatedKernel.from_matrix(Q)
    return kernel, qp.spectral(kernel), (rho, u, v)


class TestBuildKernel:
    @pytest.mark.parametrize("spec", [
        OffspringSpec.ricker("two_point_binary", 1.2, 30),
        OffspringSpec.constant("geometric", 0.8),
        OffspringSpec.ricker("poisson", 1.5, 20),
        OffspringSpec("explicit_pmf", pmf_table=[(0, 0.4), (1, 0.3), (3, 0.3)]),
    ])
    def test_mass_balance(self, spec):
        k = qp.build_kernel(spec, 60)
        rows = np.asarray(k.matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(k.absorbed + rows + k.truncated, 1.0, atol=1e-12)
        assert k.matrix.data.min() >= 0 and k.matrix.data.max() <= 1

    def test_binary_rows_even(self):
        s = OffspringSpec.ricker("two_point_binary", 1.2, 30)
        k = qp.build_kernel(s, 40)
        assert k.row(1) == {2: pytest.approx(om.pmf(s, 1, 2))}
        for i in (3, 10, 25):
            assert all(j % 2 == 0 and j <= 2 * i for j in k.row(i))

    def test_geometric_rows(self):
        s = OffspringSpec.constant("geometric", 0.8)
        k = qp.build_kernel(s, 80)
        assert k.absorbed[0] == pytest.approx(5 / 9)
        row1 = k.dense()[0]
        np.testing.assert_allclose(row1[:30], [om.pmf(s, 1, j) for j in range(1, 31)], rtol=1e-12)
        p = om.pmf_vector(s, 3)
        naive = oracles.naive_convolution(p, 3)
        np.testing.assert_allclose(k.dense()[2], naive[1:81], atol=1e-12)

    def test_explicit_matches_naive(self):
        s = OffspringSpec("explicit_pmf", pmf_table=[(0, 0.4), (1, 0.3), (3, 0.3)])
        k = qp.build_kernel(s, 30)
        for i in (1, 2, 5, 7):
            naive = oracles.naive_convolution(om.pmf_vector(s, i), i)
            ref = np.zeros(31)
            ref[:min(31, naive.size)] = naive[:31]
            np.testing.assert_allclose(k.dense()[i - 1], ref[1:], atol=1e-14)
            assert k.absorbed[i - 1] == pytest.approx(ref[0])

    def test_poisson_kernel_matches_scipy(self):
        s = OffspringSpec.beverton_holt("poisson", 20)
        k = qp.build_kernel(s, 50)
        lam = 7 * om.mean(s, 7)
        np.testing.assert_allclose(k.dense()[6], stats.poisson.pmf(np.arange(1, 51), lam), rtol=1e-12)

    def test_dump_round_trip(self):
        k = qp.build_kernel(OffspringSpec.constant("poisson", 0.7), 25)
        again = qp.load_kernel(qp.dump_kernel(k))
        np.testing.assert_array_equal(again.dense(), k.dense())
        np.testing.assert_array_equal(again.truncated, k.truncated)


class TestSpectral:
    def test_two_state(self):
        kernel, tr, (rho, u, v) = _toy()
        assert tr.rho == pytest.approx(0.71623, abs=1e-5)
        assert tr.v[1] / tr.v[0] == pytest.approx(1.72076, abs=1e-5)
        np.testing.assert_allclose([tr.rho, *tr.u, *tr.v], [rho, *u, *v], atol=1e-10)

    def test_rank_one(self):
        u = np.array([0.2, 0.3, 0.5])
        v = np.array([1.0, 2.0, 0.5])
        v = v / (u @ v)
        Q = 0.5 * np.outer(v, u) / np.outer(v, u).sum(axis=1, keepdims=True).max()
        kernel = qp.TruncatedKernel.from_matrix(Q)
        tr = qp.spectral(kernel)
        assert tr.iterations <= 2
        assert tr.residual < 1e-15
        kk = qp.TruncatedKernel.from_matrix(tr.rho * np.outer(tr.v, tr.u))
        assert qp.coupling_error(kk, tr, 5) == pytest.approx(0.0, abs=1e-14)

    def test_normalisation_and_residuals(self, ricker_qp):
        kernel, tr = ricker_qp
        assert tr.u.sum() == pytest.approx(1.0, abs=1e-10)
        assert tr.u @ tr.v == pytest.approx(1.0, abs=1e-10)
        Q = kernel.dense()
        assert np.abs(tr.u @ Q - tr.rho * tr.u).sum() <= tr.residual * (1 + 1e-6)
        assert np.abs(Q @ tr.v - tr.rho * tr.v).max() / tr.v.max() <= tr.residual * (1 + 1e-6)

    def test_positive_on_reachable_states(self, ricker_qp):
        _, tr = ricker_qp
        assert np.all(tr.v > 0)
        # only even states are reachable after one generation of binary splitting
        assert np.all(tr.u[1::2] > 0)
        assert np.all(tr.u[0::2] == 0)

    def test_non_convergence(self):
        k = qp.build_kernel(OffspringSpec.constant("geometric", 0.8), 100)
        with pytest.raises(qp.SpectralConvergenceError, match="residual"):
            qp.spectral(k, tol=1e-14, max_iters=5)

    @settings(max_examples=25, deadline=None)
    @given(m=st.floats(0.2, 0.95), fam=st.sampled_from(["geometric", "poisson", "two_point_binary"]))
    def test_gw_identity(self, m, fam):
        s = OffspringSpec.constant(fam, m)
        tol = 1e-12
        k, tr = qp.adaptive_kernel(s, min_zmax=200, tol=tol)
        # truncation at z_max perturbs rho by roughly the discarded quasi-stationary mass
        assert abs(tr.rho - m) < 1e-8
        n = k.z_max // 4
        ratio = tr.v[:n] / np.arange(1, n + 1)
        assert np.max(np.abs(ratio - ratio[0]) / ratio[0]) < 1e-3

    def test_geometric_example(self, geom_qp):
        _, tr = geom_qp
        assert tr.rho == pytest.approx(0.8, abs=1e-6)
        ratio = tr.v[:100] / np.arange(1, 101)
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-4)
        np.testing.assert_allclose(tr.u[:60], 0.2 * 0.8 ** np.arange(60), rtol=1e-8)

    def test_moment_proxies_stable_under_doubling(self, ricker_spec):
        vals = []
        for z in (100, 200):
            k = qp.build_kernel(ricker_spec, z)
            tr = qp.spectral(k)
            idx = np.arange(1, z + 1)
            vals.append((tr.u @ idx, (tr.v / idx).max()))
        np.testing.assert_allclose(vals[0], vals[1], rtol=0.01)

    def test_triple_dump_round_trip(self, ricker_qp):
        _, tr = ricker_qp
        again = qp.load_triple(qp.dump_triple(tr))
        np.testing.assert_array_equal(again.u, tr.u)
        assert again.rho == tr.rho


class TestDenseOracle:
    @settings(max_examples=30, deadline=None)
    @given(z_max=st.integers(2, 60), fam=st.sampled_from(["geometric", "poisson", "two_point_binary"]),
           model=st.sampled_from(["ricker", "bh", "const"]), r=st.floats(1.05, 1.6),
           K=st.floats(5, 40))
    def test_power_iteration_matches_eig(self, z_max, fam, model, r, K):
        if model == "ricker":
            spec = OffspringSpec.ricker(fam, r, K)
        elif model == "bh":
            spec = OffspringSpec.beverton_holt(fam, K)
        else:
            spec = OffspringSpec.constant(fam, r - 0.5)
        kernel = qp.build_kernel(spec, z_max)
        tr = qp.spectral(kernel, tol=1e-14)
        rho, u, v = oracles.dense_triple(kernel.dense())
        assert tr.rho == pytest.approx(rho, abs=1e-10)
        np.testing.assert_allclose(tr.u, u, atol=1e-10)
        np.testing.assert_allclose(tr.v, v, atol=1e-10, rtol=1e-10)


class TestQProcess:
    def test_two_state_rows(self):
        kernel, tr, _ = _toy()
        qt = qp.q_transitions(kernel, tr)
        np.testing.assert_allclose(qt.dense()[0], [0.27924, 0.72076], atol=1e-5)
        assert qp.m_up(kernel, tr, 1) == pytest.approx(1.72076, abs=1e-5)

    def test_rows_stochastic(self, ricker_qp):
        kernel, tr = ricker_qp
        qt = qp.q_transitions(kernel, tr)
        np.testing.assert_allclose(np.asarray(qt.matrix.sum(axis=1)).ravel(), 1.0, atol=1e-8)
        assert qt.max_deviation < 1e-4

    def test_gw_h_transform(self, geom_qp):
        kernel, tr = geom_qp
        qt = qp.q_transitions(kernel, tr)
        Q = kernel.dense()
        i = np.arange(1, 41)
        expect = Q[:40, :40] * i[None, :] / (0.8 * i[:, None])
        np.testing.assert_allclose(qt.dense()[:40, :40], expect, atol=1e-9)

    def test_deviation_error(self):
        kernel, tr, _ = _toy()
        bad = qp.SpectralTriple(tr.rho * 1.01, tr.u, tr.v, tr.residual)
        with pytest.raises(qp.TruncationTooSmallError):
            qp.q_transitions(kernel, bad)

    def test_ricker_targets(self, ricker_qp):
        kernel, tr = ricker_qp
        assert qp.m_up(kernel, tr, 28) == pytest.approx(1.0129, abs=1e-3)
        assert qp.m_up(kernel, tr, 8) == pytest.approx(1.1693, abs=1e-3)
        pi = qp.stationary_law(tr)
        assert pi[27] == pytest.approx(0.07997, abs=2e-3)
        assert pi[7] == pytest.approx(0.013315, abs=1e-3)
        assert pi.sum() == pytest.approx(1.0)

    def test_sigma2_up_finite(self, ricker_qp):
        kernel, tr = ricker_qp
        s2 = qp.sigma2_up_all(kernel, tr)
        assert np.all(np.isfinite(s2)) and np.all(s2[1::2] > 0)

    def test_state_out_of_range(self, ricker_qp):
        kernel, tr = ricker_qp
        with pytest.raises(ValueError):
            qp.m_up(kernel, tr, kernel.z_max + 1)


class TestConditionedRows:
    def test_t1_is_non_absorption(self, geom_qp):
        kernel, _ = geom_qp
        row = qp.conditioned_row(kernel, 3, 1)
        Q = kernel.dense()[2]
        np.testing.assert_allclose(row, Q / Q.sum(), rtol=1e-12)

    def test_converges_to_qup(self, geom_qp):
        kernel, tr = geom_qp
        qt = qp.q_transitions(kernel, tr).dense()
        for i in (1, 5, 20):
            np.testing.assert_allclose(qp.conditioned_row(kernel, i, 200), qt[i - 1], atol=1e-6)

    @pytest.mark.parametrize("i", [1, 2, 3])
    def test_binary_two_step_enumeration(self, i):
        p2 = 0.4
        spec = OffspringSpec.constant("two_point_binary", 2 * p2)
        kernel = qp.build_kernel(spec, 40)
        law = oracles.binary_path_law(lambda z: p2, i, 2)
        first = oracles.marginal(law, 1)
        row = qp.conditioned_row(kernel, i, 2)
        for j, p in first.items():
            assert row[j - 1] == pytest.approx(p, abs=1e-12)

    def test_rows_sum_to_one(self, ricker_qp):
        kernel, _ = ricker_qp
        sv = qp.SurvivalVectors(kernel, 80)
        for t in (1, 10, 81):
            R = sv.conditioned_rows(t)
            sums = np.asarray(R.sum(axis=1)).ravel()
            np.testing.assert_allclose(sums, 1.0, atol=1e-10)

    def test_survival_vectors_do_not_underflow(self, geom_qp):
        kernel, _ = geom_qp
        sv = qp.SurvivalVectors(kernel, 4000)
        assert np.all(np.isfinite(sv.vectors[-1]))
        step = sv.log_scale[4000] - sv.log_scale[3000]
        assert step == pytest.approx(1000 * math.log(0.8), rel=1e-9)

    def test_zero_survival(self):
        k = qp.TruncatedKernel.from_matrix(np.array([[0.0, 0.0], [0.5, 0.4]]))
        with pytest.raises(ValueError):
            qp.conditioned_row(k, 1, 1)


class TestCouplingError:
    @pytest.mark.parametrize("k", [1, 5, 20, 50])
    def test_geometric_closed_form(self, geom_qp, k):
        kernel, tr = geom_qp
        ref = oracles.geometric_coupling_error(0.8, k)
        assert qp.coupling_error(kernel, tr, k) == pytest.approx(ref, rel=1e-6)

    def test_geometric_k100_closed_form(self, geom_qp):
        kernel, tr = geom_qp
        assert qp.coupling_error(kernel, tr, 100) == pytest.approx(4.9213e-11, rel=1e-3)

    def test_limit_equals_d0(self, geom_qp):
        kernel, tr = geom_qp
        assert qp.coupling_limit(tr) == pytest.approx(qp.coupling_error(kernel, tr, 0), abs=1e-12)
        assert qp.coupling_limit(tr) == pytest.approx(0.32768, abs=1e-9)

    def test_limit_vanishes_for_unit_v(self):
        tr = qp.SpectralTriple(1.0, np.array([0.5, 0.5]), np.ones(2), 0.0)
        assert qp.coupling_limit(tr) == 0.0

    def test_two_state_limit(self):
        _, tr, (rho, u, v) = _toy()
        assert qp.coupling_limit(tr) == pytest.approx(0.5 * np.sum(u * np.abs(1 - v)), abs=1e-10)

    def test_profile_monotone(self, ricker_qp):
        kernel, tr = ricker_qp
        prof = qp.coupling_error_profile(kernel, tr, 150)
        assert prof.monotone_from <= 5
        assert prof.first_below(1e-6) == qp.smallest_k(kernel, tr, 1e-6)

    def test_infeasible_target(self, geom_qp):
        kernel, tr = geom_qp
        with pytest.raises(qp.InfeasibleTargetError):
            qp.smallest_k(kernel, tr, 1e-30, k_max=300)


class TestAdaptive:
    def test_tail_rule(self, ricker_qp):
        kernel, tr = ricker_qp
        assert tr.u[int(0.8 * kernel.z_max):].sum() < 1e-8

    def test_min_zmax(self, geom_spec):
        kernel, _ = qp.adaptive_kernel(geom_spec, min_zmax=300)
        assert kernel.z_max >= 300

    def test_truncation_warning(self):
        spec = OffspringSpec.ricker("two_point_binary", 1.2, 30)
        k = qp.build_kernel(spec, 36)
        tr = qp.spectral(k)
        with pytest.warns(qp.TruncationWarning):
            bad = qp.check_truncation(k, tr)
        assert bad
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            qp.adaptive_kernel(spec)
