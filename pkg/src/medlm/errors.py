"""Shared exception types."""


class MedlmError(Exception):
    """Base class for all package errors."""


class ShapeError(MedlmError):
    """Tensor shapes incompatible with the requested op."""


class ContractError(MedlmError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class EvaluationError(MedlmError):
    """A checked numeric evaluation produced a non-finite result."""


class VocabError(MedlmError):
    """Unknown symbol or invalid vocabulary input."""


class DataError(MedlmError):
    """Invalid or malformed data record."""


class ConfigError(MedlmError):
    """Invalid configuration value or stage/schema mismatch."""


class TrainingError(MedlmError):
    """Training aborted (e.g. NaN gradient)."""


class IntegrityError(MedlmError):
    """Checkpoint file corrupt or truncated."""
