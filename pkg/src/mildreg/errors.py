"""Failure modes that map onto CLI exit codes."""

from __future__ import annotations


class MildregError(Exception):
    """Base class; ``exit_code`` is the CLI contract."""

    exit_code = 1


class ConfigError(MildregError):
    exit_code = 4


class NoWindowError(MildregError):
    """No contraction window exists down to the smallest probed length."""

    exit_code = 2


class NonContractiveError(MildregError):
    """Picard increments failed to decrease on a certified window."""

    exit_code = 3


class MaxIterError(MildregError):
    """Fixed-point tolerance unmet within the iteration budget."""

    exit_code = 3


class QuadratureUnresolvedError(MildregError):
    """Trajectory quadrature changed by more than 5% under mesh doubling."""

    exit_code = 5


class PropagatorOverflowError(MildregError):
    """Matrix exponential overflowed (severely non-sectorial input)."""

    exit_code = 1
