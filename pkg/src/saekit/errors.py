"""Exception hierarchy shared by every saekit module."""


class SaekitError(Exception):
    """Base class; the CLI maps these to exit status 2."""


class FrameIntegrityError(SaekitError, ValueError):
    """Dangling reference or violated area bookkeeping in a survey frame."""


class DuplicateVisitError(FrameIntegrityError):
    pass


class DomainError(SaekitError, ValueError):
    """A numeric argument lies outside its admissible domain."""


class EmptyPopulationError(SaekitError):
    pass


class EmptySampleError(SaekitError):
    pass


class MissingStratumSampleError(SaekitError):
    """A stratum with known area received no plot visits."""

    def __init__(self, stratum_id, message=None):
        self.stratum_id = stratum_id
        super().__init__(message or f"stratum {stratum_id!r} has no sampled visits")


class UndefinedCVError(SaekitError, ZeroDivisionError):
    pass


class SingularityError(SaekitError, ValueError):
    pass


class IdentifiabilityError(SaekitError, ValueError):
    pass


class SchemaError(SaekitError):
    """CSV header does not match the expected schema."""

    def __init__(self, path, missing, unexpected):
        self.path = str(path)
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        parts = []
        if self.missing:
            parts.append("missing columns: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected columns: " + ", ".join(self.unexpected))
        super().__init__(f"{self.path}: header mismatch ({'; '.join(parts)})")


class CsvFormatError(SaekitError):
    def __init__(self, path, line, column, message):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}: column {column!r}: {message}")


class MonteCarloAbort(SaekitError):
    """More than 5% of Monte Carlo replicates failed."""
