"""
Custom exceptions for GAN compression runs.
"""

from typing import Dict, Any, List, Optional


class GanPruneError(Exception):
    """Base error class for the compression pipeline."""

    def __init__(
        self,
        message: str,
        error_type: str = "GanPruneError",
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.message = message
        self.error_type = error_type
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary."""
        return {
            "message": self.message,
            "type": self.error_type,
            "details": self.details
        }


class ConfigurationError(GanPruneError):
    """Error raised for invalid or inconsistent configuration."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="ConfigurationError",
            details=details
        )


class ContractViolation(GanPruneError):
    """Error raised when an operation's precondition does not hold."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="ContractViolation",
            details=details
        )


class DataError(GanPruneError):
    """Error raised for malformed or incomplete data."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="DataError",
            details=details
        )


class SampleLookupError(GanPruneError, LookupError):
    """Error raised when a sample id is not part of a dataset."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="SampleLookupError",
            details=details
        )


class DivergenceError(GanPruneError):
    """Error raised when a training loss becomes non-finite."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="DivergenceError",
            details=details
        )


class EncoderCollapseError(GanPruneError):
    """Error raised when encoder embeddings collapse to a constant."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="EncoderCollapseError",
            details=details
        )


class MissingArtifactError(GanPruneError):
    """Error raised when a stage runs before the stage it depends on."""

    def __init__(
        self,
        message: str,
        prerequisite: str,
        details: Optional[Dict[str, Any]] = None
    ):
        details = dict(details or {})
        details["prerequisite"] = prerequisite
        super().__init__(
            message,
            error_type="MissingArtifactError",
            details=details
        )
        self.prerequisite = prerequisite


class ReportError(GanPruneError):
    """Error raised when report inputs are absent."""

    def __init__(
        self,
        message: str,
        missing: List[str],
        details: Optional[Dict[str, Any]] = None
    ):
        details = dict(details or {})
        details["missing"] = list(missing)
        super().__init__(
            message,
            error_type="ReportError",
            details=details
        )
        self.missing = list(missing)


class RunLockedError(GanPruneError):
    """Error raised when another process holds the run directory."""

    def __init__(
        self,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(
            message,
            error_type="RunLockedError",
            details=details
        )
