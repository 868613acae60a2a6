"""Error hierarchy shared by the latent material model and its building blocks."""

from __future__ import annotations


class MatVaeServiceError(Exception):
    """Base error for latent material model operations."""


class NonFiniteError(MatVaeServiceError):
    """A forward pass or gradient produced NaN or infinity."""


class FlowDomainError(MatVaeServiceError):
    """Radial flow log-determinant argument left the positive domain."""


class DivergenceError(MatVaeServiceError):
    pass


class BatchTooSmallError(MatVaeServiceError):
    pass
