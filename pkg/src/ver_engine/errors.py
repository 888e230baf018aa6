"""Exception hierarchy shared across the engine.

``exit_code`` mirrors the CLI contract: 1 usage, 2 validation failure,
3 runtime error.
"""


class EngineError(Exception):
    exit_code = 3


class ConfigError(EngineError):
    """Invalid configuration value (dims, counts, temperatures, modes)."""

    exit_code = 2


class DimensionError(EngineError):
    """Operand shapes incompatible with the requested operation."""

    exit_code = 2


class DegenerateInputError(EngineError):
    """Input that the math cannot handle (zero vector, all-padded text)."""

    exit_code = 2


class FormatError(EngineError):
    """Corrupt or unsupported on-disk artifact."""

    exit_code = 2


class IngestionError(EngineError):
    """Inconsistent bundle set handed to the store writer."""

    exit_code = 2


class NotFoundError(EngineError):
    """Missing entity, file, or record."""

    exit_code = 2


class ValidationFailure(EngineError):
    """A validation pass reported findings."""

    exit_code = 2


class InternalError(EngineError):
    """Invariant breach inside the engine (cache/forward mismatch etc.)."""

    exit_code = 3


class TrainingDiverged(EngineError):
    """Non-finite loss; carries the path of the diagnostic batch dump."""

    exit_code = 3
