"""Exception types shared across the package."""


class OcarmError(Exception):
    """Base class for all package errors."""


class ConfigurationError(OcarmError):
    """A config value is out of range or inconsistent with another one."""


class InputError(OcarmError):
    """A record or batch violates an input contract (bad id, bad label)."""


class ContractError(OcarmError):
    """An internal call violates a shape/content contract."""


class DataFormatError(OcarmError):
    """A dataset file is malformed; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class SchemaError(OcarmError):
    """A record is missing a required field or has a wrong field type."""


class NumericError(OcarmError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointIntegrityError(OcarmError):
    """A checkpoint file is corrupted or fails its payload checksum."""


class CheckpointIncompatibleError(OcarmError):
    """A checkpoint's model config does not match the consumer's."""


class UndefinedMetricError(OcarmError):
    """A ranking metric is undefined for the given inputs (single class)."""


class InsufficientDataError(OcarmError):
    """Not enough points to compute the requested statistic."""
