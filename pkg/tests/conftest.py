import numpy as np
import pytest

import mildreg as mr


def make_dirichlet(n=64, amp=0.5, sigma_P=0.2, sigma_C=0.2, nl="tanh", scale=1.0,
                   p_scale=1.0):
    kern = mr.make_kernel("sin-poly", amplitude=amp) if amp != 0.0 else mr.make_kernel("zero")
    F = mr.make_nonlinearity(nl, scale=scale)
    return mr.build_dirichlet_bundle(n, kern, F, sigma_P, sigma_C, p_scale)


def make_neumann(n=64, amp=0.5, nl="tanh", scale=1.0, c=(1.0, 1.0)):
    kern = mr.make_kernel("sin-poly", amplitude=amp) if amp != 0.0 else mr.make_kernel("zero")
    F = mr.make_nonlinearity(nl, scale=scale)
    ups = (lambda x: np.sin(np.pi * x), lambda x: x * (1.0 - x))
    return mr.build_neumann_bundle(n, kern, F, ups, c)


def pure_heat_problem(n=32, tau=1.0, p=2.0):
    """P = 0, F = 0 on the classical Dirichlet Laplacian."""
    b = make_dirichlet(n=n, amp=0.0, nl="tanh", scale=0.0, p_scale=0.0)
    x0 = mr.default_initial_state(b.grid)
    return mr.MildProblem(b, x0, tau, p)


@pytest.fixture(scope="session")
def dirichlet_default_bundle():
    return make_dirichlet()


@pytest.fixture(scope="session")
def neumann_default_bundle():
    return make_neumann()


@pytest.fixture
def rng():
    return np.random.default_rng(0x5EED)
