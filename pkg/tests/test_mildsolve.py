import dataclasses

import numpy as np
import pytest
import scipy.linalg

import mildreg as mr
from mildreg.admissibility import ContractionWindow, estimate_gamma, choose_window
from mildreg.errors import MaxIterError, NonContractiveError
from mildreg.meshnorm import StateVector, TimeMesh, Trajectory, l2_norm, lp_time_norm
from mildreg.mildsolve import (
    MildProblem,
    PicardConfig,
    convolve,
    oracle_solve,
    phi_map,
    picard_window,
    representation_residual,
    solve,
    strong_residual,
    trajectory_from_binary,
    trajectory_to_binary,
    trajectory_to_csv,
)
from mildreg.problems import smooth_into_trace_space
from mildreg.semigroup import build_propagator

from conftest import make_dirichlet, make_neumann, pure_heat_problem


def default_problem(n=64, **kw):
    b = make_dirichlet(n=n, **kw)
    return MildProblem(b, mr.default_initial_state(b.grid), 1.0, 2.0)


class TestConvolve:
    def test_zero_input(self, dirichlet_default_bundle, rng):
        b = dirichlet_default_bundle
        mesh = TimeMesh(0.0, 1.0, 50)
        prop = build_propagator(b.A, mesh.dt)
        out = convolve(prop, Trajectory(mesh, b.grid, np.zeros((51, 64))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_constant_eigenmode_closed_form(self):
        b = make_dirichlet(n=32, amp=0.0)
        mesh = TimeMesh(0.0, 1.0, 64)
        prop = build_propagator(b.A0, mesh.dt, eig=b.eig)
        k = 2
        phi, mu = b.eig.modes()[:, k], b.eig.mu[k]
        v = Trajectory(mesh, b.grid, np.tile(phi, (65, 1)))
        w = convolve(prop, v)
        expected = (1 - np.exp(-mu * mesh.nodes))[:, None] / mu * phi[None, :]
        # phi-weights integrate a constant against the kernel exactly
        np.testing.assert_allclose(w.values, expected, atol=1e-12)

    def test_backward_difference_residual_first_order(self, rng):
        # (u_i - u_{i-1})/dt + A u_i - v_i -> 0 at first order, random forcing
        b = make_dirichlet(n=6, amp=0.0)
        v_coarse = rng.standard_normal((26, 6))
        t_coarse = np.linspace(0, 1, 26)
        worsts = []
        for m in (400, 800, 1600):
            mesh = TimeMesh(0.0, 1.0, m)
            # persistently refine one random forcing by linear interpolation
            vals = np.empty((m + 1, 6))
            for j in range(6):
                vals[:, j] = np.interp(mesh.nodes, t_coarse, v_coarse[:, j])
            prop = build_propagator(b.A0, mesh.dt, eig=b.eig)
            u = convolve(prop, Trajectory(mesh, b.grid, vals)).values
            res = (u[1:] - u[:-1]) / mesh.dt + u[1:] @ b.A0.T - vals[1:]
            worsts.append(
                np.sqrt(np.einsum("ij,ij->i", res, res * b.grid.weights[None, :])).max())
        assert worsts[0] / worsts[1] > 1.7
        assert worsts[1] / worsts[2] > 1.7

    def test_mesh_mismatch_rejected(self, dirichlet_default_bundle):
        b = dirichlet_default_bundle
        prop = build_propagator(b.A, 0.01)
        with pytest.raises(ValueError):
            convolve(prop, Trajectory(TimeMesh(0.0, 1.0, 50), b.grid, np.zeros((51, 64))))


class TestPhiMap:
    def test_vanishes_without_forcing(self):
        prob = pure_heat_problem()
        mesh = TimeMesh(0.0, 1.0, 20)
        n = prob.bundle.grid.n_nodes
        out = phi_map(prob, mesh, Trajectory(mesh, prob.bundle.grid, np.zeros((21, n))))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_linear_fixed_point_matches_exponential(self):
        # P = 0, C = I, f = identity: u solves u' + (A - I)u = 0
        b = make_dirichlet(n=64, amp=0.5, nl="identity", sigma_P=0.0, p_scale=0.0)
        b = dataclasses.replace(b, C=np.eye(64))
        x0 = mr.default_initial_state(b.grid)
        prob = MildProblem(b, x0, 1.0, 2.0)
        u, rep = solve(prob, PicardConfig(m_steps_per_window=200))
        ref = scipy.linalg.expm(-1.0 * (b.A - np.eye(64))) @ x0.values
        gap = l2_norm(StateVector(b.grid, u.values[-1] - ref))
        assert gap <= 1e-5

    def test_affine_in_v_when_f_affine(self, rng):
        b = make_dirichlet(n=24, nl="identity")
        prob = MildProblem(b, mr.default_initial_state(b.grid), 1.0, 2.0)
        mesh = TimeMesh(0.0, 0.5, 32)
        v1 = Trajectory(mesh, b.grid, rng.standard_normal((33, 24)))
        v2 = Trajectory(mesh, b.grid, rng.standard_normal((33, 24)))
        mid = Trajectory(mesh, b.grid, 0.5 * v1.values + 0.5 * v2.values)
        lhs = phi_map(prob, mesh, mid).values
        rhs = 0.5 * phi_map(prob, mesh, v1).values + 0.5 * phi_map(prob, mesh, v2).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestPicardWindow:
    def test_zero_data_converges_immediately(self):
        prob = pure_heat_problem(n=16)
        prob = MildProblem(prob.bundle, StateVector(prob.bundle.grid, np.zeros(16)), 1.0, 2.0)
        w = ContractionWindow(alpha0=1.0, q=2.0, kappa=0.0, gamma=0.0,
                              bound_value=0.0, theta_target=0.9)
        traj, diag = picard_window(prob, prob.x0, w, PicardConfig(m_steps_per_window=20))
        assert diag.iterations <= 2
        np.testing.assert_allclose(traj.values, 0.0, atol=1e-14)

    def test_linear_ratio_matches_measured_lipschitz(self):
        b = make_dirichlet(n=32, nl="identity")
        x0 = mr.default_initial_state(b.grid)
        prob = MildProblem(b, x0, 1.0, 2.0)
        certP = estimate_gamma(b, "P", 2.0, 1.0)
        certC = estimate_gamma(b, "C", 2.0, 1.0)
        w = choose_window(certP, certC, b.F.kappa, 2.0, 0.9, 1.0)
        traj, diag = picard_window(prob, x0, w, PicardConfig(m_steps_per_window=100))
        from mildreg.admissibility import measure_phi_lipschitz

        lip = measure_phi_lipschitz(prob, w, 10, m_steps=100)
        assert diag.observed_ratio <= max(lip, 1e-6) * 1.6

    def test_increments_fit_geometric_line(self):
        prob = default_problem()
        certP = estimate_gamma(prob.bundle, "P", 2.0, 1.0)
        certC = estimate_gamma(prob.bundle, "C", 2.0, 1.0)
        w = choose_window(certP, certC, 1.0, 2.0, 0.9, 1.0)
        _, diag = picard_window(prob, prob.x0, w, PicardConfig(m_steps_per_window=100))
        assert diag.iterations >= 6
        assert diag.increment_fit_residual < 0.1

    def test_non_contractive_detected(self):
        # scaled identity keeps Phi linear and expansive on a unit window
        # (scaled tanh would saturate and sneak back into contraction)
        b = make_dirichlet(n=16, nl="identity", scale=30.0)
        x0 = mr.default_initial_state(b.grid)
        prob = MildProblem(b, x0, 1.0, 2.0)
        w = ContractionWindow(alpha0=1.0, q=2.0, kappa=30.0, gamma=0.4,
                              bound_value=12.0, theta_target=0.9)
        with pytest.raises(NonContractiveError):
            picard_window(prob, x0, w, PicardConfig(m_steps_per_window=50, max_iter=60))

    def test_max_iter_reported(self):
        prob = default_problem(n=16)
        w = ContractionWindow(alpha0=1.0, q=2.0, kappa=1.0, gamma=0.4,
                              bound_value=0.8, theta_target=0.9)
        with pytest.raises(MaxIterError):
            picard_window(prob, prob.x0, w,
                          PicardConfig(m_steps_per_window=50, max_iter=3, rel_tol=1e-14))


class TestSolve:
    def test_pure_heat_reduces_to_evolution(self):
        prob = pure_heat_problem(n=32)
        u, rep = solve(prob, PicardConfig(m_steps_per_window=100))
        assert len(rep.windows) == 1  # zero perturbation: single window = tau
        prop = build_propagator(prob.bundle.A0, u.mesh.dt, eig=prob.bundle.eig)
        direct = mr.evolve_trajectory(prop, prob.x0, u.mesh)
        gap = np.abs(u.values - direct.values).max()
        assert gap <= 1e-12
        assert rep.exact_gap is not None and rep.exact_gap <= 1e-10

    def test_default_example_matches_extrapolated_oracle(self):
        prob = default_problem()
        u, rep = solve(prob, PicardConfig(m_steps_per_window=200))
        assert rep.oracle_gap <= 1e-3
        assert all(w.observed_ratio < 1.0 for w in rep.windows)

    def test_window_count_decreases_with_kappa(self):
        # kappa large enough to force subdivision
        prob_hi = default_problem(scale=4.0)
        prob_lo = default_problem(scale=0.1)
        _, rep_hi = solve(prob_hi, PicardConfig(m_steps_per_window=50))
        _, rep_lo = solve(prob_lo, PicardConfig(m_steps_per_window=50))
        assert len(rep_hi.windows) > len(rep_lo.windows)
        assert len(rep_lo.windows) == 1

    def test_joints_continuous_and_uniform_mesh(self):
        prob = default_problem(scale=4.0)
        u, rep = solve(prob, PicardConfig(m_steps_per_window=40))
        assert len(rep.windows) > 1
        assert u.mesh.m_steps == 40 * len(rep.windows)
        # trajectory rows are shared exactly at the joints by construction;
        # continuity shows as bounded differences around every joint
        jumps = np.abs(np.diff(u.values, axis=0)).max(axis=1)
        assert np.isfinite(jumps).all()

    def test_uniqueness_of_fixed_point(self):
        prob = default_problem(n=32)
        cfg = PicardConfig(m_steps_per_window=100, rel_tol=1e-11)
        u0, _ = solve(prob, cfg, v0_mode="zero")
        u1, _ = solve(prob, cfg, v0_mode="random")
        gap = np.abs(u0.values - u1.values).max()
        assert gap <= 10 * cfg.rel_tol * max(1.0, np.abs(u0.values).max())

    def test_total_steps_override(self):
        prob = default_problem(n=16, scale=4.0)
        u, rep = solve(prob, PicardConfig(m_steps_per_window=10), total_m_steps=120)
        assert u.mesh.m_steps >= 120


class TestResiduals:
    def test_representation_pure_heat_tiny(self):
        prob = pure_heat_problem(n=32)
        u, _ = solve(prob, PicardConfig(m_steps_per_window=100))
        assert representation_residual(prob, u) <= 1e-12

    def test_representation_self_consistency_of_fixed_point(self):
        prob = default_problem()
        cfg = PicardConfig(m_steps_per_window=150)
        u, rep = solve(prob, cfg)
        scale = max(l2_norm(s) for s in u.states)
        assert rep.representation_residual <= 10 * cfg.rel_tol * max(scale, 1.0)

    def test_representation_discriminates_oracle(self):
        # implicit Euler satisfies the mild identity only to O(dt); the rate
        # shows on trace-compatible data (raw data pins it at the t=0 layer)
        b = make_dirichlet(n=32)
        x0 = smooth_into_trace_space(b, mr.default_initial_state(b.grid), 0.05)
        prob = MildProblem(b, x0, 1.0, 2.0)
        res = []
        for m in (50, 100, 200):
            v = oracle_solve(prob, "implicit_euler", m)
            res.append(representation_residual(prob, v))
        assert res[0] > 1e-4
        assert res[0] / res[1] > 1.6 and res[1] / res[2] > 1.6

    def test_strong_residual_eigenmode_second_order(self):
        prob = pure_heat_problem(n=16)
        b = prob.bundle
        phi, mu = b.eig.modes()[:, 0], b.eig.mu[0]
        res = []
        for m in (50, 100, 200):
            mesh = TimeMesh(0.0, 1.0, m)
            vals = np.exp(-mu * mesh.nodes)[:, None] * phi[None, :]
            res.append(strong_residual(prob, Trajectory(mesh, b.grid, vals)))
        # central differences: second order in the interior, endpoint-limited
        assert res[0] / res[1] > 2.6 and res[1] / res[2] > 2.6

    def test_strong_residual_refines_on_trace_data(self):
        b = make_dirichlet(n=24)
        x0 = smooth_into_trace_space(b, mr.default_initial_state(b.grid), 0.05)
        prob = MildProblem(b, x0, 1.0, 2.0)
        res = []
        for m in (200, 400):
            _, rep = solve(prob, PicardConfig(m_steps_per_window=m))
            res.append(rep.strong_residual)
        assert res[0] / res[1] >= 1.8

    def test_strong_residual_incompatible_data_stalls(self):
        # raw sin(pi x) violates the nonlocal trace condition; the t=0 node
        # pins the refinement rate at ~sqrt(2) per doubling
        prob = default_problem()
        res = []
        for m in (100, 200):
            _, rep = solve(prob, PicardConfig(m_steps_per_window=m))
            res.append(rep.strong_residual)
        assert 1.2 < res[0] / res[1] < 1.7

    def test_random_trajectory_is_not_a_solution(self, rng):
        prob = default_problem(n=16)
        vals = rng.standard_normal((101, 16))
        r1 = strong_residual(prob, Trajectory(TimeMesh(0.0, 1.0, 100), prob.bundle.grid, vals))
        assert r1 > 1.0


class TestOracle:
    def test_implicit_euler_eigenmode_exact_recursion(self):
        prob = pure_heat_problem(n=16)
        b = prob.bundle
        phi, mu = b.eig.modes()[:, 0], b.eig.mu[0]
        prob = MildProblem(b, StateVector(b.grid, phi), 1.0, 2.0)
        m = 40
        traj = oracle_solve(prob, "implicit_euler", m)
        dt = 1.0 / m
        for i in (1, 7, m):
            np.testing.assert_allclose(
                traj.values[i], (1 + dt * mu) ** (-i) * phi, rtol=1e-12)

    def test_consistency_orders_by_richardson(self):
        # linear problem: IE first order, CN second order
        b = make_dirichlet(n=32, nl="identity", scale=0.0, p_scale=1.0, sigma_P=0.2)
        x0 = mr.default_initial_state(b.grid)
        prob = MildProblem(b, x0, 1.0, 2.0)
        ref = scipy.linalg.expm(-(b.A - b.P)) @ x0.values

        def endpoint_err(scheme, m):
            end = oracle_solve(prob, scheme, m).values[-1]
            return l2_norm(StateVector(b.grid, end - ref))

        e_ie = [endpoint_err("implicit_euler", m) for m in (100, 200, 400)]
        e_cn = [endpoint_err("crank_nicolson", m) for m in (100, 200, 400)]
        r_ie = e_ie[0] / e_ie[1]
        r_cn = e_cn[0] / e_cn[1]
        assert 1.7 < r_ie < 2.4        # order 1
        assert 3.4 < r_cn < 4.8        # order 2

    def test_oracle_and_picard_converge_jointly_neumann(self):
        b = make_neumann(n=32)
        x0 = mr.default_initial_state(b.grid)
        prob = MildProblem(b, x0, 1.0, 2.0)
        gaps = []
        for m in (50, 100, 200):
            u, _ = solve(prob, PicardConfig(m_steps_per_window=m))
            v = oracle_solve(prob, "crank_nicolson", m)
            gaps.append(l2_norm(StateVector(b.grid, u.values[-1] - v.values[-1])))
        assert gaps[0] / gaps[1] > 1.8 and gaps[1] / gaps[2] > 1.8

    def test_rejects_bad_scheme_and_steps(self):
        prob = pure_heat_problem(n=8)
        with pytest.raises(ValueError):
            oracle_solve(prob, "leapfrog", 10)
        with pytest.raises(ValueError):
            oracle_solve(prob, "implicit_euler", 1)


class TestSerialization:
    def test_csv_and_binary_roundtrip(self, tmp_path, rng):
        b = make_dirichlet(n=8)
        mesh = TimeMesh(0.0, 0.5, 12)
        traj = Trajectory(mesh, b.grid, rng.standard_normal((13, 8)))
        csv_path = tmp_path / "traj.csv"
        bin_path = tmp_path / "traj.mrtj"
        trajectory_to_csv(csv_path, traj)
        trajectory_to_binary(bin_path, traj)
        back = trajectory_from_binary(bin_path, b.grid)
        np.testing.assert_array_equal(back.values, traj.values)
        assert back.mesh.t_end == traj.mesh.t_end
        header = open(csv_path).readline().strip().split(",")
        assert header[0] == "t" and len(header) == 9
        with open(bin_path, "rb") as fh:
            assert fh.read(5) == b"MRTJ1"

    def test_binary_magic_enforced(self, tmp_path):
        p = tmp_path / "bad.mrtj"
        p.write_bytes(b"NOPE!" + b"\x00" * 16)
        b = make_dirichlet(n=8)
        with pytest.raises(ValueError):
            trajectory_from_binary(p, b.grid)
