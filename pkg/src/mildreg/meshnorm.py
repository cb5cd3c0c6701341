"""Spatial grids, time meshes and the discrete norms of the solver state spaces.

Everything downstream measures grid functions in the trapezoidal L2(0,1) norm
and time-indexed trajectories in the induced L^p-in-time norm. Dirichlet
discretizations store interior nodes only (boundary values are eliminated);
Neumann discretizations store the boundary nodes, with half mass at the ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid1D",
    "TimeMesh",
    "StateVector",
    "Trajectory",
    "dirichlet_grid",
    "neumann_grid",
    "l2_norm",
    "lp_time_norm",
    "mr_norm",
    "time_derivative",
]


@dataclass(frozen=True)
class Grid1D:
    """Uniform 1D grid on (0,1).

    ``include_boundary=False`` is the Dirichlet layout (interior nodes
    x_j = j*h, h = 1/(n_interior+1)); ``include_boundary=True`` is the
    Neumann layout (nodes x_j = j*h including 0 and 1, h = 1/(n_nodes-1)).
    """

    n_interior: int
    include_boundary: bool = False

    def __post_init__(self):
        if self.n_interior < 1:
            raise ValueError(f"need at least one interior node, got {self.n_interior}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def n_nodes(self) -> int:
        return self.n_interior + 2 if self.include_boundary else self.n_interior

    @property
    def nodes(self) -> np.ndarray:
        if self.include_boundary:
            return np.linspace(0.0, 1.0, self.n_nodes)
        return np.linspace(self.h, 1.0 - self.h, self.n_nodes)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights of the discrete L2(0,1) inner product."""
        w = np.full(self.n_nodes, self.h)
        if self.include_boundary:
            w[0] = w[-1] = self.h / 2.0
        return w

    def functional_weights(self) -> np.ndarray:
        """Weights for integrating a grid function against a bounded kernel.

        On Neumann grids this is the plain trapezoid rule. On Dirichlet grids
        the end samples are extended into the boundary half-cells (weights
        3h/2) so that constants integrate exactly; interior-only trapezoid
        weights lose the O(h) boundary mass.
        """
        if self.include_boundary:
            return self.weights
        w = np.full(self.n_nodes, self.h)
        w[0] += self.h / 2.0
        w[-1] += self.h / 2.0
        return w


def dirichlet_grid(n_interior: int) -> Grid1D:
    return Grid1D(n_interior, include_boundary=False)


def neumann_grid(n_interior: int) -> Grid1D:
    """Neumann grid with ``n_interior + 2`` nodes (boundary included)."""
    return Grid1D(n_interior, include_boundary=True)


@dataclass(frozen=True)
class TimeMesh:
    """Uniform mesh of [t_start, t_end] with m_steps intervals."""

    t_start: float
    t_end: float
    m_steps: int

    def __post_init__(self):
        if self.m_steps < 1:
            raise ValueError("m_steps must be positive")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.m_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.m_steps + 1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights over the mesh nodes."""
        w = np.full(self.m_steps + 1, self.dt)
        w[0] = w[-1] = self.dt / 2.0
        return w


@dataclass(frozen=True)
class StateVector:
    """A grid function: one value per node of its grid."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"values shape {v.shape} does not match grid with {self.grid.n_nodes} nodes"
            )


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed family of grid functions on a shared uniform mesh.

    ``values[i]`` is the state at ``mesh.nodes[i]``.
    """

    mesh: TimeMesh
    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.shape != (self.mesh.m_steps + 1, self.grid.n_nodes):
            raise ValueError(
                f"trajectory shape {v.shape} incompatible with mesh "
                f"({self.mesh.m_steps + 1} nodes) and grid ({self.grid.n_nodes} nodes)"
            )

    @property
    def states(self) -> list[StateVector]:
        return [StateVector(self.grid, row) for row in self.values]

    def state(self, i: int) -> StateVector:
        return StateVector(self.grid, self.values[i])


def _l2_norm_rows(values: np.ndarray, grid: Grid1D) -> np.ndarray:
    """l2 norms of one state (1D input) or of each row of a trajectory array."""
    v = np.asarray(values, dtype=float)
    return np.sqrt(np.maximum(v * v, 0.0) @ grid.weights)


def l2_norm(u: StateVector) -> float:
    """Discrete L2(0,1) norm: sqrt(sum_j w_j u_j^2) with trapezoidal weights."""
    return float(_l2_norm_rows(u.values, u.grid))


def lp_time_norm(v: Trajectory, p: float) -> float:
    """L^p([t_start,t_end], X) norm with trapezoidal weights in time.

    Rejects p <= 1; the solver theory lives in p in (1, inf).
    """
    if not p > 1.0:
        raise ValueError(f"p must exceed 1, got {p}")
    r = _l2_norm_rows(v.values, v.grid)
    return float((v.mesh.weights @ r**p) ** (1.0 / p))


def time_derivative(v: Trajectory) -> Trajectory:
    """Difference-quotient time derivative: central interior, one-sided ends."""
    if v.mesh.m_steps < 2:
        raise ValueError("need at least 3 time nodes for a derivative")
    dt = v.mesh.dt
    dv = np.empty_like(v.values)
    dv[1:-1] = (v.values[2:] - v.values[:-2]) / (2.0 * dt)
    dv[0] = (v.values[1] - v.values[0]) / dt
    dv[-1] = (v.values[-1] - v.values[-2]) / dt
    return Trajectory(v.mesh, v.grid, dv)


def mr_norm(u: Trajectory, A: np.ndarray, p: float) -> float:
    """Discrete maximal-regularity norm: |u|_p + |du/dt|_p + |A u|_p."""
    A = np.asarray(A, dtype=float)
    if A.shape != (u.grid.n_nodes, u.grid.n_nodes):
        raise ValueError(
            f"operator shape {A.shape} does not match grid with {u.grid.n_nodes} nodes"
        )
    au = Trajectory(u.mesh, u.grid, u.values @ A.T)
    return lp_time_norm(u, p) + lp_time_norm(time_derivative(u), p) + lp_time_norm(au, p)
