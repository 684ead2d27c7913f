"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class DimensionError(ContractError):
    """Tensor shapes do not line up for the requested operation."""
