"""Exception types shared across the harness."""


class DriftHarnessError(Exception):
    """Base class for all harness errors."""


class ConfigError(DriftHarnessError):
    """Invalid run configuration (bad granularity, missing paths, bad spec)."""


class CorpusParseError(DriftHarnessError):
    """A corpus file line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class CorpusValidationError(DriftHarnessError):
    """A corpus record violates an invariant (label, date range, duplicate id)."""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TrainingDivergedError(DriftHarnessError):
    """Training produced a non-finite loss; the model was left untouched."""


class LeakageError(DriftHarnessError):
    """An evaluation instance was found in an earlier training batch."""


class ProtocolError(DriftHarnessError):
    """External model adapter violated the wire protocol."""
