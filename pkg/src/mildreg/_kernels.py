"""Hot time-stepping kernels: numba-jitted with a pure-numpy fallback.

The solver's inner loops are loop-carried recursions over the time mesh
(propagator chains, the causal convolution, the Volterra forward step) that
numpy cannot batch across steps. They are compiled with numba when available.

Backend selection, via the MILDREG_BACKEND environment variable:

* ``auto`` (default) — numba if importable, else numpy
* ``numba``          — require numba, raise if missing
* ``numpy``          — force the pure-numpy implementations

Both backends run the same recursions; results agree to rounding in the
matmul accumulation order. ``benchmarks/bench_kernels.py`` compares them.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "evolve_chain",
    "causal_conv",
    "volterra_forward",
    "get_backend_functions",
]


def _evolve_chain_np(E, x, m):
    n = x.shape[0]
    out = np.empty((m + 1, n))
    out[0] = x
    for i in range(1, m + 1):
        out[i] = E @ out[i - 1]
    return out


def _causal_conv_np(E, WL, WR, V):
    m = V.shape[0] - 1
    out = np.zeros_like(V)
    for i in range(1, m + 1):
        out[i] = E @ out[i - 1] + WL @ V[i - 1] + WR @ V[i]
    return out


def _volterra_forward_np(E0, WL, WR, B, Cinv, x, m):
    n = x.shape[0]
    U = np.empty((m + 1, n))
    U[0] = x
    ex = x.copy()
    y = np.zeros(n)
    g_prev = B @ x
    for i in range(1, m + 1):
        ex = E0 @ ex
        y = E0 @ y + WL @ g_prev
        U[i] = Cinv @ (ex + y)
        g_prev = B @ U[i]
        y = y + WR @ g_prev
    return U


_REQUESTED = os.environ.get("MILDREG_BACKEND", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"MILDREG_BACKEND must be one of auto|numba|numpy, got {_REQUESTED!r}"
    )

_numba_err = None
if _REQUESTED in ("auto", "numba"):
    try:
        import numba

        threads = os.environ.get("MILDREG_THREADS")
        if threads:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))

        _evolve_chain_nb = numba.njit(cache=True)(_evolve_chain_np)
        _causal_conv_nb = numba.njit(cache=True)(_causal_conv_np)
        _volterra_forward_nb = numba.njit(cache=True)(_volterra_forward_np)
        BACKEND = "numba"
    except ImportError as exc:  # pragma: no cover - depends on environment
        if _REQUESTED == "numba":
            raise ImportError("MILDREG_BACKEND=numba but numba is not importable") from exc
        _numba_err = exc
        BACKEND = "numpy"
else:
    BACKEND = "numpy"


def get_backend_functions(backend: str):
    """Return (evolve_chain, causal_conv, volterra_forward) for a backend name."""
    if backend == "numpy":
        return _evolve_chain_np, _causal_conv_np, _volterra_forward_np
    if backend == "numba":
        if BACKEND != "numba":
            raise RuntimeError("numba backend unavailable in this process")
        return _evolve_chain_nb, _causal_conv_nb, _volterra_forward_nb
    raise ValueError(f"unknown backend {backend!r}")


_evolve, _conv, _volterra = get_backend_functions(BACKEND)

_F = dict(dtype=float)


def evolve_chain(E: np.ndarray, x: np.ndarray, m: int) -> np.ndarray:
    """Rows i = E^i x for i = 0..m."""
    return _evolve(np.ascontiguousarray(E, **_F), np.ascontiguousarray(x, **_F), m)


def causal_conv(E: np.ndarray, WL: np.ndarray, WR: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Causal convolution w_i = E w_{i-1} + WL v_{i-1} + WR v_i, w_0 = 0.

    With WL = dt(phi1-phi2)(dt A) and WR = dt phi2(dt A) this is the
    product-trapezoid discretization of int_0^t e^{-(t-s)A} v(s) ds.
    """
    return _conv(
        np.ascontiguousarray(E, **_F),
        np.ascontiguousarray(WL, **_F),
        np.ascontiguousarray(WR, **_F),
        np.ascontiguousarray(V, **_F),
    )


def volterra_forward(
    E0: np.ndarray,
    WL: np.ndarray,
    WR: np.ndarray,
    B: np.ndarray,
    Cinv: np.ndarray,
    x: np.ndarray,
    m: int,
) -> np.ndarray:
    """Forward time-stepping for u(t) = e^{-tA0}x + int_0^t e^{-(t-s)A0} B u(s) ds.

    The diagonal (implicit) term is removed by Cinv = (I - WR B)^{-1},
    prefactored by the caller.
    """
    return _volterra(
        np.ascontiguousarray(E0, **_F),
        np.ascontiguousarray(WL, **_F),
        np.ascontiguousarray(WR, **_F),
        np.ascontiguousarray(B, **_F),
        np.ascontiguousarray(Cinv, **_F),
        np.ascontiguousarray(x, **_F),
        m,
    )
