"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class MsdannError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MsdannError, ValueError):
    """Invalid configuration value (dimension, site id, prevalence, ...)."""


class ShapeError(MsdannError, ValueError):
    pass


class NumericInputError(MsdannError, ValueError):
    pass


class LabelError(MsdannError, ValueError):
    pass


class CacheError(MsdannError, ValueError):
    """A forward cache does not belong to the network it is used with."""


class SchemaError(MsdannError, ValueError):
    pass


class IngestionError(MsdannError, ValueError):
    """Dataset file could not be parsed; ``row`` is the 1-based data row."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SplitError(MsdannError, ValueError):
    pass


class TrainingDivergedError(MsdannError, RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")


class UndefinedMetricError(MsdannError, ValueError):
    pass


class UnsupportedOperationError(MsdannError, TypeError):
    pass
