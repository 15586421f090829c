"""Exception hierarchy shared by the library and the CLI."""


class LatresError(Exception):
    """Base class for all errors raised by latres."""


class LatticeParseError(LatresError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LatticeStructureError(LatresError):
    """Cycle, dead or unreachable state, or a non-deterministic arc."""


class CapacityError(LatresError):
    """Raised when an enumeration would exceed its configured limit."""


class ConfigError(LatresError):
    pass


class DataError(LatresError):
    pass


class NumericError(LatresError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message)
