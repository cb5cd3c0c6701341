"""Assembly of the spatial operators on (0,1).

Covers the Dirichlet/Neumann second-difference Laplacians and their exact
eigendecompositions, the nonlocal boundary functional, the Dirichlet and
Neumann lift maps, the nonlocal (ghost-stencil) generators, spectral
fractional powers, the boundary-trace operator of the Neumann example, and
the pointwise (Nemytskii) nonlinearity.

Inner-product convention: all operator norms and orthogonality statements are
taken in the trapezoidal-mass L2 inner product of the grid (see meshnorm).
For Dirichlet grids the mass is uniform (h*I) and this coincides with plain
Euclidean symmetry; for Neumann grids the ghost-closure Laplacian is
self-adjoint with respect to the half-weighted boundary mass, and the stored
eigenvector factor Q is orthonormal for the mass-symmetrized matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .meshnorm import Grid1D, StateVector

__all__ = [
    "KernelSpec",
    "NonlinearitySpec",
    "EigDecomposition",
    "OperatorBundle",
    "SpectralPositivityWarning",
    "assemble_dirichlet_laplacian",
    "assemble_neumann_laplacian",
    "assemble_boundary_functional",
    "dirichlet_map",
    "neumann_map",
    "assemble_nonlocal_dirichlet_generator",
    "assemble_nonlocal_neumann_generator",
    "fractional_power",
    "boundary_trace_operator",
    "apply_nemytskii",
    "x_operator_norm",
    "boundary_to_x_norm",
    "make_kernel",
    "make_nonlinearity",
    "KERNEL_NAMES",
    "NONLINEARITY_NAMES",
]


class SpectralPositivityWarning(UserWarning):
    """Perturbed generator has spectrum reaching into the left half-plane."""


@dataclass(frozen=True)
class KernelSpec:
    """Boundary kernel K(x,.) sampled at the two boundary points x in {0,1}.

    ``k0`` and ``k1`` are the profiles K(0,y) and K(1,y) on [0,1];
    ``amplitude`` scales both.
    """

    k0: Callable[[np.ndarray], np.ndarray]
    k1: Callable[[np.ndarray], np.ndarray]
    amplitude: float = 1.0
    name: str = "custom"

    def check_bounded(self, n_samples: int = 257, bound: float = 1e6) -> None:
        y = np.linspace(0.0, 1.0, n_samples)
        for f, lbl in ((self.k0, "k0"), (self.k1, "k1")):
            v = np.asarray(f(y), dtype=float)
            if not np.all(np.isfinite(v)) or np.abs(v).max() > bound:
                raise ValueError(f"kernel component {lbl} is not bounded on [0,1]")


@dataclass(frozen=True)
class NonlinearitySpec:
    """Scalar function together with its global Lipschitz constant."""

    f: Callable[[np.ndarray], np.ndarray]
    kappa: float
    name: str = "custom"

    def check_lipschitz(self, rng: np.random.Generator, n_pairs: int = 200) -> float:
        """Empirical Lipschitz ratio on sampled pairs (must be <= kappa)."""
        a = rng.uniform(-5.0, 5.0, n_pairs)
        b = rng.uniform(-5.0, 5.0, n_pairs)
        num = np.abs(np.asarray(self.f(a)) - np.asarray(self.f(b)))
        den = np.abs(a - b)
        mask = den > 1e-12
        worst = float((num[mask] / den[mask]).max()) if mask.any() else 0.0
        if worst > self.kappa * (1.0 + 1e-9) + 1e-12:
            raise ValueError(
                f"nonlinearity {self.name!r}: sampled Lipschitz ratio {worst} exceeds "
                f"declared kappa {self.kappa}"
            )
        return worst


@dataclass(frozen=True)
class EigDecomposition:
    """Eigendecomposition of a mass-self-adjoint operator.

    ``mu`` ascending eigenvalues; ``Q`` orthonormal eigenvectors of the
    mass-symmetrized matrix D A D^{-1} with D = diag(sqrt_w). State-space
    eigenvectors of A itself (unit L2 norm) are the columns of ``modes()``.
    """

    mu: np.ndarray
    Q: np.ndarray
    sqrt_w: np.ndarray

    def modes(self) -> np.ndarray:
        return self.Q / self.sqrt_w[:, None]

    def apply_function(self, fvals: np.ndarray, U: np.ndarray) -> np.ndarray:
        """f(A) applied to the columns of U, f given by its eigenvalue samples."""
        coef = self.Q.T @ (self.sqrt_w[:, None] * U)
        return (self.Q @ (fvals[:, None] * coef)) / self.sqrt_w[:, None]

    def matrix_function(self, fvals: np.ndarray) -> np.ndarray:
        return (self.Q * fvals[None, :]) @ self.Q.T * (1.0 / self.sqrt_w)[:, None] * self.sqrt_w[None, :]

    def reconstruct(self) -> np.ndarray:
        return self.matrix_function(self.mu)


def x_operator_norm(T: np.ndarray, grid: Grid1D) -> float:
    """Operator norm of a square matrix acting on the discrete L2 space."""
    d = np.sqrt(grid.weights)
    return float(np.linalg.norm((T * d[:, None]) / d[None, :], 2))


def boundary_to_x_norm(T: np.ndarray, grid: Grid1D) -> float:
    """Operator norm of a (nodes x 2) map from boundary data into the L2 space."""
    d = np.sqrt(grid.weights)
    return float(np.linalg.norm(T * d[:, None], 2))


# ---------------------------------------------------------------------------
# Laplacians with exact eigendecompositions


def assemble_dirichlet_laplacian(grid: Grid1D) -> tuple[np.ndarray, EigDecomposition]:
    """Interior second-difference Laplacian (1/h^2) tridiag(-1, 2, -1).

    Eigenpairs are exact: mu_k = (4/h^2) sin^2(k pi h / 2) with sine-sample
    eigenvectors, assembled in closed form.
    """
    if grid.include_boundary:
        raise ValueError("Dirichlet Laplacian requires an interior-only grid")
    n = grid.n_interior
    if n < 2:
        raise ValueError("need at least 2 interior nodes")
    h = grid.h
    A0 = (
        np.diag(np.full(n, 2.0))
        - np.diag(np.ones(n - 1), 1)
        - np.diag(np.ones(n - 1), -1)
    ) / h**2
    k = np.arange(1, n + 1)
    mu = (4.0 / h**2) * np.sin(k * np.pi * h / 2.0) ** 2
    # sin(k pi x_j), Euclidean-orthogonal with squared norm (n+1)/2
    Q = np.sin(np.outer(grid.nodes, k) * np.pi) * np.sqrt(2.0 / (n + 1))
    return A0, EigDecomposition(mu=mu, Q=Q, sqrt_w=np.sqrt(grid.weights))


def assemble_neumann_laplacian(grid: Grid1D) -> tuple[np.ndarray, EigDecomposition]:
    """Second-difference Laplacian with ghost-point zero-flux closure.

    First and last rows carry the (1/h^2)(1,-1) pattern scaled by the inverse
    boundary half-mass (factor 2), which makes the matrix self-adjoint in the
    trapezoidal-mass inner product. Eigenpairs are exact cosine samples:
    mu_k = (4/h^2) sin^2(k pi h / 2).
    """
    if not grid.include_boundary:
        raise ValueError("Neumann Laplacian requires a grid with boundary nodes")
    n = grid.n_nodes
    if n < 3:
        raise ValueError("need at least 3 nodes")
    h = grid.h
    A0 = (
        np.diag(np.full(n, 2.0))
        - np.diag(np.ones(n - 1), 1)
        - np.diag(np.ones(n - 1), -1)
    ) / h**2
    A0[0, 0] = 2.0 / h**2
    A0[0, 1] = -2.0 / h**2
    A0[-1, -1] = 2.0 / h**2
    A0[-1, -2] = -2.0 / h**2
    N = n - 1
    k = np.arange(0, n)
    mu = (4.0 / h**2) * np.sin(k * np.pi * h / 2.0) ** 2
    V = np.cos(np.outer(grid.nodes, k) * np.pi)
    # normalize to unit mass-norm: ||cos(k pi x)||^2 = 1/2 interior, 1 for k in {0,N}
    scale = np.full(n, np.sqrt(2.0))
    scale[0] = scale[-1] = 1.0
    V = V * scale[None, :]
    sqrt_w = np.sqrt(grid.weights)
    return A0, EigDecomposition(mu=mu, Q=V * sqrt_w[:, None], sqrt_w=sqrt_w)


# ---------------------------------------------------------------------------
# Boundary coupling


def assemble_boundary_functional(grid: Grid1D, kernel: KernelSpec) -> np.ndarray:
    """Quadrature of int_0^1 K(b, y) u(y) dy at the two boundary points b.

    Returns the 2 x n matrix of the functional. Dirichlet grids use the
    boundary-extended trapezoid weights so constants integrate exactly.
    """
    kernel.check_bounded()
    y = grid.nodes
    w = grid.functional_weights()
    a = kernel.amplitude
    return np.vstack([
        a * w * np.asarray(kernel.k0(y), dtype=float),
        a * w * np.asarray(kernel.k1(y), dtype=float),
    ])


def dirichlet_map(grid: Grid1D) -> np.ndarray:
    """Harmonic (linear) extension of boundary values, sampled at interior nodes."""
    if grid.include_boundary:
        raise ValueError("Dirichlet map is defined on interior-only grids")
    x = grid.nodes
    return np.column_stack([1.0 - x, x])


def neumann_map(grid: Grid1D) -> np.ndarray:
    """Lift of prescribed boundary flux: (I - Laplacian) phi = 0, d phi/d nu = psi.

    Closed form phi = (psi0 cosh(1-x) + psi1 cosh(x)) / sinh(1), sampled at
    the nodes; columns correspond to psi = (1,0) and (0,1).
    """
    if not grid.include_boundary:
        raise ValueError("Neumann map is defined on grids with boundary nodes")
    x = grid.nodes
    s = np.sinh(1.0)
    return np.column_stack([np.cosh(1.0 - x) / s, np.cosh(x) / s])


def _warn_if_unstable(A: np.ndarray, label: str, threshold: float = -1e-8) -> np.ndarray:
    ev = np.linalg.eigvals(A)
    worst = float(ev.real.min())
    if worst < threshold:
        warnings.warn(
            f"{label}: spectrum reaches Re(lambda) = {worst:.3e} < {threshold:.0e}; "
            "the semigroup grows and the solver will treat it as a shifted problem",
            SpectralPositivityWarning,
            stacklevel=3,
        )
    return ev


def assemble_nonlocal_dirichlet_generator(
    grid: Grid1D, kernel: KernelSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Ghost-stencil generator with nonlocal boundary values u(b) = (M u)_b.

    Row 1 reads (2 u_1 - u_2 - (M u)_0)/h^2 and symmetrically at the last
    node; algebraically identical to A0 (I - D M) with the linear-extension
    Dirichlet map D. Returns (A, M_op).
    """
    A0, _ = assemble_dirichlet_laplacian(grid)
    M_op = assemble_boundary_functional(grid, kernel)
    A = A0.copy()
    A[0, :] -= M_op[0, :] / grid.h**2
    A[-1, :] -= M_op[1, :] / grid.h**2
    if kernel.amplitude != 0.0:
        _warn_if_unstable(A, "nonlocal Dirichlet generator")
    return A, M_op


def assemble_nonlocal_neumann_generator(
    grid: Grid1D, kernel: KernelSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Ghost-stencil generator with nonlocal flux condition grad(u).nu = M u.

    The ghost value at each end absorbs the prescribed flux at second order:
    boundary rows read (2/h^2)(u_0 - u_1) - (2/h)(M u)_0 and symmetrically.
    Returns (A, M_op).
    """
    A0, _ = assemble_neumann_laplacian(grid)
    M_op = assemble_boundary_functional(grid, kernel)
    A = A0.copy()
    A[0, :] -= (2.0 / grid.h) * M_op[0, :]
    A[-1, :] -= (2.0 / grid.h) * M_op[1, :]
    if kernel.amplitude != 0.0:
        _warn_if_unstable(A, "nonlocal Neumann generator")
    return A, M_op


def boundary_trace_operator(
    grid: Grid1D,
    upsilon: tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]],
    c: tuple[float, float],
) -> np.ndarray:
    """Rank-<=2 readout (C u)(x) = Upsilon(x,0) c_0 u(0) + Upsilon(x,1) c_1 u(1)."""
    if not grid.include_boundary:
        raise ValueError("boundary trace requires boundary nodes on the grid")
    x = grid.nodes
    T = np.zeros((grid.n_nodes, grid.n_nodes))
    T[:, 0] += c[0] * np.asarray(upsilon[0](x), dtype=float)
    T[:, -1] += c[1] * np.asarray(upsilon[1](x), dtype=float)
    return T


# ---------------------------------------------------------------------------
# Spectral calculus and the nonlinearity


def fractional_power(bundle: "OperatorBundle", sigma: float) -> np.ndarray:
    """Spectral fractional power A0^sigma of the unperturbed Laplacian.

    The Neumann zero mode maps to 0 for every sigma >= 0 (projector
    convention), so sigma = 0 gives the identity on the range of A0.
    """
    if sigma < 0.0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma > 1.0:
        raise ValueError(f"sigma must not exceed 1, got {sigma}")
    eig = bundle.eig
    cutoff = 1e-12 * max(eig.mu.max(), 1.0)
    fvals = np.where(eig.mu > cutoff, np.maximum(eig.mu, cutoff) ** sigma, 0.0)
    return eig.matrix_function(fvals)


def apply_nemytskii(F: NonlinearitySpec, u: StateVector) -> StateVector:
    """Entrywise application of the scalar nonlinearity."""
    return StateVector(u.grid, np.asarray(F.f(u.values), dtype=float))


# ---------------------------------------------------------------------------
# The assembled problem operators


@dataclass(frozen=True)
class OperatorBundle:
    """All spatial operators of one problem instance.

    ``A`` is the (generally nonsymmetric) nonlocal generator in the sign
    convention u' + A u = P u + F(C u); ``A0`` the unperturbed symmetric
    Laplacian with its exact eigendecomposition; ``M_op`` the 2 x n boundary
    functional.
    """

    grid: Grid1D
    bc: str
    A: np.ndarray = field(repr=False)
    A0: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)
    F: NonlinearitySpec
    M_op: np.ndarray = field(repr=False)
    eig: EigDecomposition = field(repr=False)
    kernel: KernelSpec | None = None

    def __post_init__(self):
        n = self.grid.n_nodes
        for name in ("A", "A0", "P", "C"):
            mat = getattr(self, name)
            if mat.shape != (n, n):
                raise ValueError(f"operator {name} has shape {mat.shape}, expected {(n, n)}")
        if self.M_op.shape != (2, n):
            raise ValueError(f"M_op has shape {self.M_op.shape}, expected {(2, n)}")
        if self.bc not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown bc {self.bc!r}")

    @property
    def perturbation(self) -> np.ndarray:
        """The discrete Desch-Schappacher perturbation B = A0 - A (rank <= 2)."""
        return self.A0 - self.A

    def spectral_norm(self) -> float:
        """2-norm bound used to grade stiff time meshes."""
        return float(max(self.eig.mu.max(), np.linalg.norm(self.A, 2)))


# ---------------------------------------------------------------------------
# Named families selectable from configuration

KERNEL_NAMES = ("zero", "sin-poly", "gaussian")
NONLINEARITY_NAMES = ("identity", "tanh", "sin", "affine-clamp")


def make_kernel(
    name: str,
    amplitude: float = 0.5,
    center: float = 0.5,
    width: float = 0.1,
) -> KernelSpec:
    if name == "zero":
        zero = lambda y: np.zeros_like(np.asarray(y, dtype=float))
        return KernelSpec(k0=zero, k1=zero, amplitude=0.0, name="zero")
    if name == "sin-poly":
        return KernelSpec(
            k0=lambda y: np.sin(np.pi * y),
            k1=lambda y: y * (1.0 - y),
            amplitude=amplitude,
            name="sin-poly",
        )
    if name == "gaussian":
        if width <= 0:
            raise ValueError("gaussian kernel needs width > 0")
        return KernelSpec(
            k0=lambda y: np.exp(-(((y - center) / width) ** 2)),
            k1=lambda y: np.exp(-(((y - (1.0 - center)) / width) ** 2)),
            amplitude=amplitude,
            name="gaussian",
        )
    raise ValueError(f"unknown kernel {name!r}; choose from {KERNEL_NAMES}")


def make_nonlinearity(
    name: str,
    scale: float = 1.0,
    slope: float = 1.0,
    cap: float = 1.0,
) -> NonlinearitySpec:
    """Named scalar nonlinearity, scaled by ``scale`` (kappa scales along)."""
    if name == "identity":
        f, kap = (lambda z: np.asarray(z, dtype=float)), 1.0
    elif name == "tanh":
        f, kap = np.tanh, 1.0
    elif name == "sin":
        f, kap = np.sin, 1.0
    elif name == "affine-clamp":
        if cap <= 0:
            raise ValueError("affine-clamp needs cap > 0")
        f, kap = (lambda z: slope * np.clip(z, -cap, cap)), abs(slope)
    else:
        raise ValueError(f"unknown nonlinearity {name!r}; choose from {NONLINEARITY_NAMES}")
    base = f
    if scale != 1.0:
        g = lambda z, _b=base: scale * _b(z)
    else:
        g = base
    return NonlinearitySpec(f=g, kappa=abs(scale) * kap, name=name)
