import numpy as np
import pytest

import mildreg as mr
from mildreg.meshnorm import StateVector, dirichlet_grid, l2_norm, neumann_grid
from mildreg.operators import (
    SpectralPositivityWarning,
    boundary_to_x_norm,
    make_kernel,
    make_nonlinearity,
    x_operator_norm,
)

from conftest import make_dirichlet, make_neumann


class TestDirichletLaplacian:
    def test_stencil_n3(self):
        A0, _ = mr.assemble_dirichlet_laplacian(dirichlet_grid(3))
        expected = 16.0 * np.array([[2, -1, 0], [-1, 2, -1], [0, -1, 2]])
        np.testing.assert_allclose(A0, expected, atol=1e-12)

    @pytest.mark.parametrize("n", [5, 32, 64])
    def test_eigenvalues_closed_form(self, n):
        g = dirichlet_grid(n)
        A0, eig = mr.assemble_dirichlet_laplacian(g)
        k = np.arange(1, n + 1)
        mu = (4.0 / g.h**2) * np.sin(k * np.pi * g.h / 2) ** 2
        np.testing.assert_allclose(eig.mu, mu, rtol=1e-10)
        # eigenpairs actually diagonalize the assembled matrix
        V = eig.modes()
        np.testing.assert_allclose(A0 @ V, V * mu[None, :], atol=1e-8 * mu.max())

    def test_smallest_eigenvalue_approaches_pi_squared(self):
        _, eig = mr.assemble_dirichlet_laplacian(dirichlet_grid(64))
        assert abs(eig.mu[0] - np.pi**2) < 0.01

    def test_orthonormal_and_reconstructs(self):
        A0, eig = mr.assemble_dirichlet_laplacian(dirichlet_grid(48))
        np.testing.assert_allclose(eig.Q.T @ eig.Q, np.eye(48), atol=1e-10)
        rel = np.abs(eig.reconstruct() - A0).max() / np.abs(A0).max()
        assert rel < 1e-10

    def test_rejects_small_or_wrong_grid(self):
        with pytest.raises(ValueError):
            mr.assemble_dirichlet_laplacian(dirichlet_grid(1))
        with pytest.raises(ValueError):
            mr.assemble_dirichlet_laplacian(neumann_grid(8))


class TestNeumannLaplacian:
    def test_constant_in_kernel(self):
        A0, _ = mr.assemble_neumann_laplacian(neumann_grid(8))
        np.testing.assert_allclose(A0 @ np.ones(10), 0.0, atol=1e-10)

    def test_zero_eigenvalue_simple(self):
        _, eig = mr.assemble_neumann_laplacian(neumann_grid(16))
        assert abs(eig.mu[0]) < 1e-10
        assert eig.mu[1] > 1.0

    def test_second_eigenpair_is_cosine(self):
        g = neumann_grid(30)
        A0, eig = mr.assemble_neumann_laplacian(g)
        v = eig.modes()[:, 1]
        c = np.cos(np.pi * g.nodes)
        c /= l2_norm(StateVector(g, c))
        agree = min(np.abs(v - c).max(), np.abs(v + c).max())
        assert agree < 1e-9  # exact eigenvector, up to sign
        assert abs(eig.mu[1] - np.pi**2) < 9.0 * g.h**2  # leading term (pi^4/12) h^2

    def test_eigenvalue_error_second_order(self):
        errs = []
        for n in (8, 16, 32):
            _, eig = mr.assemble_neumann_laplacian(neumann_grid(n))
            errs.append(abs(eig.mu[1] - np.pi**2))
        assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5

    def test_mass_symmetric_psd(self):
        g = neumann_grid(12)
        A0, eig = mr.assemble_neumann_laplacian(g)
        M = np.diag(g.weights)
        np.testing.assert_allclose(M @ A0, (M @ A0).T, atol=1e-10)
        assert eig.mu.min() >= -1e-12
        np.testing.assert_allclose(eig.Q.T @ eig.Q, np.eye(g.n_nodes), atol=1e-10)

    def test_rejects_tiny(self):
        with pytest.raises(ValueError):
            mr.assemble_neumann_laplacian(neumann_grid(0))


class TestBoundaryFunctional:
    def test_zero_kernel(self):
        g = dirichlet_grid(16)
        M = mr.assemble_boundary_functional(g, make_kernel("zero"))
        np.testing.assert_allclose(M, 0.0)

    def test_constant_kernel_integrates_to_one(self):
        g = dirichlet_grid(64)
        kern = mr.KernelSpec(k0=lambda y: np.ones_like(y), k1=lambda y: np.ones_like(y),
                             amplitude=1.0)
        M = mr.assemble_boundary_functional(g, kern)
        u = np.ones(g.n_nodes)
        assert abs(M[0] @ u - 1.0) < 1e-3

    def test_sine_pair_gives_half(self):
        # int_0^1 sin^2(pi y) dy = 1/2, checked under refinement
        errs = []
        for n in (32, 64, 128):
            g = dirichlet_grid(n)
            kern = mr.KernelSpec(k0=lambda y: np.sin(np.pi * y),
                                 k1=lambda y: np.zeros_like(y), amplitude=1.0)
            M = mr.assemble_boundary_functional(g, kern)
            errs.append(abs(M[0] @ np.sin(np.pi * g.nodes) - 0.5))
        assert errs[-1] < 1e-4 and errs[0] > errs[-1]

    def test_unbounded_kernel_rejected(self):
        g = dirichlet_grid(8)
        bad = mr.KernelSpec(k0=lambda y: 1.0 / np.maximum(y, 1e-300),
                            k1=lambda y: np.zeros_like(y), amplitude=1.0)
        with pytest.raises(ValueError):
            mr.assemble_boundary_functional(g, bad)


class TestDirichletMap:
    def test_harmonic_extension_of_constants(self):
        g = dirichlet_grid(11)
        D = mr.dirichlet_map(g)
        np.testing.assert_allclose(D @ np.array([1.0, 1.0]), 1.0, atol=1e-14)

    def test_linear_ramp(self):
        g = dirichlet_grid(11)
        D = mr.dirichlet_map(g)
        np.testing.assert_allclose(D @ np.array([0.0, 1.0]), g.nodes, atol=1e-14)

    def test_generator_factorization_identity(self):
        # A0 (I - D M) equals the ghost stencil, in units of the stencil scale
        g = dirichlet_grid(64)
        kern = make_kernel("sin-poly", amplitude=0.5)
        A, M_op = mr.assemble_nonlocal_dirichlet_generator(g, kern)
        A0, _ = mr.assemble_dirichlet_laplacian(g)
        D = mr.dirichlet_map(g)
        route2 = A0 @ (np.eye(64) - D @ M_op)
        assert np.abs(A - route2).max() * g.h**2 < 1e-12


class TestNonlocalGenerators:
    def test_zero_kernel_reduces_exactly(self):
        g = dirichlet_grid(24)
        A, _ = mr.assemble_nonlocal_dirichlet_generator(g, make_kernel("zero"))
        A0, _ = mr.assemble_dirichlet_laplacian(g)
        np.testing.assert_array_equal(A, A0)
        gn = neumann_grid(24)
        B, _ = mr.assemble_nonlocal_neumann_generator(gn, make_kernel("zero"))
        B0, _ = mr.assemble_neumann_laplacian(gn)
        np.testing.assert_array_equal(B, B0)

    def test_default_amplitude_spectrum_stays_right_half_plane(self):
        g = dirichlet_grid(64)
        A, _ = mr.assemble_nonlocal_dirichlet_generator(g, make_kernel("sin-poly", amplitude=0.5))
        assert np.linalg.eigvals(A).real.min() > 0

    def test_neumann_flux_rows(self):
        g = neumann_grid(16)
        c = 0.3
        kern = mr.KernelSpec(k0=lambda y: np.full_like(y, c), k1=lambda y: np.full_like(y, c),
                             amplitude=1.0)
        A, M_op = mr.assemble_nonlocal_neumann_generator(g, kern)
        u = np.ones(g.n_nodes)
        out = A @ u
        np.testing.assert_allclose(out[1:-1], 0.0, atol=1e-10)
        # boundary rows see the flux M u = (c, c)
        assert out[0] == pytest.approx(-(2.0 / g.h) * c, rel=1e-10)
        assert out[-1] == pytest.approx(-(2.0 / g.h) * c, rel=1e-10)

    def test_eigenvalues_continuous_in_amplitude(self):
        g = neumann_grid(32)
        tops = []
        for a in np.linspace(0.0, 0.5, 6):
            A, _ = mr.assemble_nonlocal_neumann_generator(g, make_kernel("sin-poly", amplitude=a))
            tops.append(np.linalg.eigvals(A).real.min())
        drifts = np.abs(np.diff(tops))
        assert np.all(np.isfinite(drifts)) and drifts.max() < 1.0

    def test_unstable_spectrum_warns(self):
        g = neumann_grid(32)
        with pytest.warns(SpectralPositivityWarning):
            mr.assemble_nonlocal_neumann_generator(g, make_kernel("sin-poly", amplitude=0.5))


class TestNeumannMap:
    def test_zero_flux(self):
        g = neumann_grid(16)
        N = mr.neumann_map(g)
        np.testing.assert_allclose(N @ np.zeros(2), 0.0)

    def test_cosh_closed_form_and_flux(self):
        g = neumann_grid(64)
        N = mr.neumann_map(g)
        x = g.nodes
        phi = np.cosh(1 - x) / np.sinh(1.0)
        np.testing.assert_allclose(N[:, 0], phi, atol=1e-12)
        # analytic flux of the closed form: -phi'(0) = 1, phi'(1) = 0
        dphi = lambda t: -np.sinh(1 - t) / np.sinh(1.0)
        assert -dphi(0.0) == pytest.approx(1.0, abs=1e-12)
        assert dphi(1.0) == pytest.approx(0.0, abs=1e-12)

    def test_reflection_symmetry(self):
        g = neumann_grid(20)
        N = mr.neumann_map(g)
        psi = np.array([0.7, -0.3])
        flipped = N @ psi[::-1]
        np.testing.assert_allclose(N @ psi, flipped[::-1], atol=1e-12)

    def test_lift_consistency_with_discrete_perturbation(self):
        # (I + A0) N M approaches the exact discrete perturbation A0 - A
        rel = []
        for n in (16, 32, 64, 128):
            b = make_neumann(n=n)
            N = mr.neumann_map(b.grid)
            P_lift = (np.eye(b.grid.n_nodes) + b.A0) @ N @ b.M_op
            exact = b.perturbation
            rel.append(
                x_operator_norm(P_lift - exact, b.grid) / x_operator_norm(exact, b.grid)
            )
        assert rel[-1] < 0.02 and rel[0] > rel[-1]


class TestFractionalPower:
    def test_sigma_zero_dirichlet_identity(self, dirichlet_default_bundle):
        P0 = mr.fractional_power(dirichlet_default_bundle, 0.0)
        np.testing.assert_allclose(P0, np.eye(64), atol=1e-10)

    def test_sigma_zero_neumann_projects_constants(self, neumann_default_bundle):
        b = neumann_default_bundle
        P0 = mr.fractional_power(b, 0.0)
        np.testing.assert_allclose(P0 @ np.ones(b.grid.n_nodes), 0.0, atol=1e-9)
        v = np.cos(np.pi * b.grid.nodes)
        np.testing.assert_allclose(P0 @ v, v, atol=1e-9)

    def test_sigma_one_recovers_matrix(self, dirichlet_default_bundle):
        b = dirichlet_default_bundle
        A1 = mr.fractional_power(b, 1.0)
        assert np.abs(A1 - b.A0).max() / np.abs(b.A0).max() < 1e-10

    @pytest.mark.parametrize("bundle_name", ["dirichlet", "neumann"])
    def test_half_power_squares(self, bundle_name, dirichlet_default_bundle, neumann_default_bundle):
        b = dirichlet_default_bundle if bundle_name == "dirichlet" else neumann_default_bundle
        H = mr.fractional_power(b, 0.5)
        rel = np.linalg.norm(H @ H - b.A0) / np.linalg.norm(b.A0)
        assert rel < 1e-8

    def test_multiplicative(self, dirichlet_default_bundle):
        b = dirichlet_default_bundle
        for s, r in ((0.3, 0.4), (0.25, 0.25)):
            lhs = mr.fractional_power(b, s) @ mr.fractional_power(b, r)
            rhs = mr.fractional_power(b, s + r)
            assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-8

    def test_rejects_out_of_range(self, dirichlet_default_bundle):
        with pytest.raises(ValueError):
            mr.fractional_power(dirichlet_default_bundle, -0.1)
        with pytest.raises(ValueError):
            mr.fractional_power(dirichlet_default_bundle, 1.5)


class TestBoundaryTrace:
    def test_zero_weights(self):
        g = neumann_grid(12)
        T = mr.boundary_trace_operator(g, (np.sin, np.cos), (0.0, 0.0))
        np.testing.assert_allclose(T, 0.0)

    def test_constant_profile_reads_left_value(self):
        g = neumann_grid(12)
        one = lambda x: np.ones_like(x)
        T = mr.boundary_trace_operator(g, (one, one), (1.0, 0.0))
        u = np.zeros(g.n_nodes)
        u[0] = 3.0
        np.testing.assert_allclose(T @ u, 3.0)

    def test_rank_at_most_two(self):
        g = neumann_grid(20)
        T = mr.boundary_trace_operator(
            g, (lambda x: np.sin(np.pi * x), lambda x: x * (1 - x)), (1.0, 2.0))
        assert np.linalg.matrix_rank(T) <= 2


class TestNemytskii:
    def test_identity(self, rng):
        g = dirichlet_grid(16)
        u = StateVector(g, rng.standard_normal(16))
        out = mr.apply_nemytskii(make_nonlinearity("identity"), u)
        np.testing.assert_array_equal(out.values, u.values)

    def test_tanh_fixes_zero(self):
        g = dirichlet_grid(8)
        out = mr.apply_nemytskii(make_nonlinearity("tanh"), StateVector(g, np.zeros(8)))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_lipschitz_bound_on_pairs(self, rng):
        g = dirichlet_grid(32)
        F = make_nonlinearity("tanh")
        for _ in range(100):
            u = StateVector(g, rng.standard_normal(32))
            v = StateVector(g, rng.standard_normal(32))
            lhs = l2_norm(StateVector(g, mr.apply_nemytskii(F, u).values
                                      - mr.apply_nemytskii(F, v).values))
            rhs = F.kappa * l2_norm(StateVector(g, u.values - v.values))
            assert lhs <= rhs + 1e-12

    def test_commutes_with_permutation(self, rng):
        g = dirichlet_grid(16)
        F = make_nonlinearity("sin")
        u = rng.standard_normal(16)
        perm = rng.permutation(16)
        a = mr.apply_nemytskii(F, StateVector(g, u)).values[perm]
        b = mr.apply_nemytskii(F, StateVector(g, u[perm])).values
        np.testing.assert_array_equal(a, b)

    def test_affine_clamp_and_scale_kappa(self):
        F = make_nonlinearity("affine-clamp", slope=2.0, cap=1.5)
        assert F.kappa == 2.0
        np.testing.assert_allclose(F.f(np.array([0.5, 10.0])), [1.0, 3.0])
        Fs = make_nonlinearity("tanh", scale=0.25)
        assert Fs.kappa == 0.25

    def test_declared_kappa_validated(self, rng):
        good = make_nonlinearity("tanh")
        assert good.check_lipschitz(rng) <= 1.0 + 1e-9
        bad = mr.NonlinearitySpec(f=lambda z: 3.0 * z, kappa=1.0, name="liar")
        with pytest.raises(ValueError):
            bad.check_lipschitz(rng)


class TestNamedFamilies:
    def test_registries(self):
        for name in mr.operators.KERNEL_NAMES:
            make_kernel(name)
        for name in mr.operators.NONLINEARITY_NAMES:
            make_nonlinearity(name)
        with pytest.raises(ValueError):
            make_kernel("fourier")
        with pytest.raises(ValueError):
            make_nonlinearity("cubic")

    def test_gaussian_kernel_bounded(self):
        k = make_kernel("gaussian", amplitude=1.0, center=0.3, width=0.05)
        k.check_bounded()


def test_x_operator_norm_matches_weighted_svd(rng):
    g = neumann_grid(10)
    T = rng.standard_normal((g.n_nodes, g.n_nodes))
    d = np.sqrt(g.weights)
    assert x_operator_norm(T, g) == pytest.approx(
        np.linalg.norm(np.diag(d) @ T @ np.diag(1 / d), 2))
    G = rng.standard_normal((g.n_nodes, 2))
    assert boundary_to_x_norm(G, g) == pytest.approx(np.linalg.norm(np.diag(d) @ G, 2))
