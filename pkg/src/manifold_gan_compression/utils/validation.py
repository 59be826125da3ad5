"""
Contract checks shared by the numerical modules.
"""

from typing import Any

import torch

from .exceptions import ContractViolation


def require(condition: bool, message: str, **details: Any) -> None:
    """Raise ContractViolation with structured details unless ``condition`` holds."""
    if not condition:
        raise ContractViolation(message, details=details or None)


def require_finite(tensor: torch.Tensor, what: str, **details: Any) -> None:
    """Reject tensors containing NaN or infinity."""
    if not bool(torch.isfinite(tensor).all()):
        raise ContractViolation(f"{what} contains non-finite values", details=details or None)


def require_range(
    tensor: torch.Tensor,
    low: float,
    high: float,
    what: str,
    atol: float = 1e-4
) -> None:
    """Assert an image-range convention at a module boundary."""
    require_finite(tensor, what)
    lo = float(tensor.min()) if tensor.numel() else low
    hi = float(tensor.max()) if tensor.numel() else high
    if lo < low - atol or hi > high + atol:
        raise ContractViolation(
            f"{what} outside expected range [{low}, {high}]",
            details={"min": lo, "max": hi}
        )
