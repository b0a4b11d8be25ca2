"""Exception types raised across the package."""

from __future__ import annotations


class PeftDmlError(Exception):
    """Base class for all package errors."""


class ConstructionError(PeftDmlError, ValueError):
    pass


class ShapeError(PeftDmlError, ValueError):
    pass


class NumericDomainError(PeftDmlError, ValueError):
    pass


class ContractError(PeftDmlError, RuntimeError):
    pass


class ConfigError(PeftDmlError, ValueError):
    pass


class GenerationError(PeftDmlError, RuntimeError):
    pass


class AvailabilityError(PeftDmlError, ValueError):
    """Raised when an operation needs at least one available modality."""


class DegenerateEmbeddingError(PeftDmlError, ValueError):
    """Raised when a vector is too close to zero to be normalized."""


class ManifestError(PeftDmlError, RuntimeError):
    """I/O or hash mismatch while reading a manifest or checkpoint."""


class TrainingError(PeftDmlError, RuntimeError):
    def __init__(self, message: str, step_record: dict | None = None):
        super().__init__(message)
        self.step_record = step_record or {}
