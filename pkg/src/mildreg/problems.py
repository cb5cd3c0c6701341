"""The two shipped nonlocal-boundary heat problems as operator bundles.

dirichlet_nonlocal: u' = (Laplacian + p_scale*(-Laplacian)^sigma_P) u
                        + f((-Laplacian)^sigma_C u)
with nonlocal Dirichlet values u(b) = (M u)_b at the two boundary points.

neumann_nonlocal: u' = Laplacian u + f(C u) with nonlocal flux
grad(u).nu = M u and the rank-2 boundary readout
(C u)(x) = Upsilon(x,0) c0 u(0) + Upsilon(x,1) c1 u(1).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .meshnorm import Grid1D, StateVector, dirichlet_grid, neumann_grid
from .operators import (
    KernelSpec,
    NonlinearitySpec,
    OperatorBundle,
    assemble_dirichlet_laplacian,
    assemble_neumann_laplacian,
    assemble_nonlocal_dirichlet_generator,
    assemble_nonlocal_neumann_generator,
    boundary_trace_operator,
    fractional_power,
    make_kernel,
)

__all__ = [
    "build_dirichlet_bundle",
    "build_neumann_bundle",
    "rebuild_at_grid_size",
    "default_initial_state",
    "make_upsilon",
    "UPSILON_NAMES",
]

UPSILON_NAMES = ("one", "sin-poly", "gaussian")


def make_upsilon(
    name: str, center: float = 0.5, width: float = 0.1
) -> tuple[Callable, Callable]:
    """Named profile pair Upsilon(., 0), Upsilon(., 1) for the trace readout."""
    if name == "one":
        one = lambda x: np.ones_like(np.asarray(x, dtype=float))
        return one, one
    if name == "sin-poly":
        return (lambda x: np.sin(np.pi * x)), (lambda x: x * (1.0 - x))
    if name == "gaussian":
        return (
            lambda x: np.exp(-(((x - center) / width) ** 2)),
            lambda x: np.exp(-(((x - (1.0 - center)) / width) ** 2)),
        )
    raise ValueError(f"unknown upsilon {name!r}; choose from {UPSILON_NAMES}")


def build_dirichlet_bundle(
    n_grid: int,
    kernel: KernelSpec,
    F: NonlinearitySpec,
    sigma_P: float,
    sigma_C: float,
    p_scale: float = 1.0,
) -> OperatorBundle:
    grid = dirichlet_grid(n_grid)
    A0, eig = assemble_dirichlet_laplacian(grid)
    A, M_op = assemble_nonlocal_dirichlet_generator(grid, kernel)
    bundle = OperatorBundle(
        grid=grid, bc="dirichlet", A=A, A0=A0,
        P=np.zeros_like(A0), C=np.zeros_like(A0),
        F=F, M_op=M_op, eig=eig, kernel=kernel,
    )
    P = p_scale * fractional_power(bundle, sigma_P) if p_scale != 0.0 else np.zeros_like(A0)
    C = fractional_power(bundle, sigma_C)
    return OperatorBundle(
        grid=grid, bc="dirichlet", A=A, A0=A0, P=P, C=C,
        F=F, M_op=M_op, eig=eig, kernel=kernel,
    )


def build_neumann_bundle(
    n_grid: int,
    kernel: KernelSpec,
    F: NonlinearitySpec,
    upsilon: tuple[Callable, Callable],
    c: tuple[float, float],
) -> OperatorBundle:
    grid = neumann_grid(n_grid)
    A0, eig = assemble_neumann_laplacian(grid)
    A, M_op = assemble_nonlocal_neumann_generator(grid, kernel)
    C = boundary_trace_operator(grid, upsilon, c)
    return OperatorBundle(
        grid=grid, bc="neumann", A=A, A0=A0,
        P=np.zeros_like(A0), C=C,
        F=F, M_op=M_op, eig=eig, kernel=kernel,
    )


def rebuild_at_grid_size(bundle: OperatorBundle, n_grid: int) -> OperatorBundle:
    """Same boundary condition and kernel on a refined/coarsened grid.

    Used by refinement studies; P and C are left zero (the study supplies
    its own observation operator).
    """
    kernel = bundle.kernel if bundle.kernel is not None else make_kernel("zero")
    if bundle.bc == "dirichlet":
        grid = dirichlet_grid(n_grid)
        A0, eig = assemble_dirichlet_laplacian(grid)
        A, M_op = assemble_nonlocal_dirichlet_generator(grid, kernel)
    else:
        grid = neumann_grid(n_grid)
        A0, eig = assemble_neumann_laplacian(grid)
        A, M_op = assemble_nonlocal_neumann_generator(grid, kernel)
    zero = np.zeros_like(A0)
    return OperatorBundle(
        grid=grid, bc=bundle.bc, A=A, A0=A0, P=zero, C=zero,
        F=bundle.F, M_op=M_op, eig=eig, kernel=kernel,
    )


def default_initial_state(grid: Grid1D) -> StateVector:
    """sin(pi x) on Dirichlet grids, 1 + cos(pi x) on Neumann grids."""
    x = grid.nodes
    if grid.include_boundary:
        return StateVector(grid, 1.0 + np.cos(np.pi * x))
    return StateVector(grid, np.sin(np.pi * x))


def smooth_into_trace_space(
    bundle: OperatorBundle, x0: StateVector, eps: float = 0.05
) -> StateVector:
    """e^{-eps A} x0: initial data compatible with the nonlocal condition.

    Generic x0 violates the boundary coupling (its trace differs from M x0),
    which puts an unresolvable O(h^-2) transient at t = 0; a short semigroup
    ride lands in the trace space, where residual refinement studies see the
    scheme's consistency order.
    """
    import scipy.linalg

    if eps <= 0:
        raise ValueError("eps must be positive")
    return StateVector(x0.grid, scipy.linalg.expm(-eps * bundle.A) @ x0.values)
