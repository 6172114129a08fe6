"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes: usage errors exit 1,
data/format errors exit 2, training errors exit 3.
"""


class AmortencError(Exception):
    """Base class for all package errors."""


class ConfigError(AmortencError, ValueError):
    """Invalid model or run configuration."""


class InputError(AmortencError, ValueError):
    """Malformed input data (token sequences, tensors, texts)."""


class ParameterError(AmortencError, ValueError):
    """Invalid operation parameters (shapes, strategy arguments)."""


class FormatError(AmortencError, ValueError):
    """Corrupt or truncated binary artifact.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StorageError(AmortencError, OSError):
    """I/O failure while persisting or loading artifacts."""


class IngestionError(AmortencError, ValueError):
    """Bad row in an ingested dataset file.

    ``line`` is the 1-based line number of the offending row.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class TrainingError(AmortencError, RuntimeError):
    """Training diverged or was misconfigured.

    ``step`` is the optimizer step at which the failure was detected.
    """

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
