"""Exception types. The CLI maps each family to a process exit code."""


class StcError(Exception):
    exit_code = 1


class ConfigError(StcError, ValueError):
    exit_code = 2


class MissingPrerequisiteError(StcError):
    exit_code = 3


class NumericFailure(StcError, ArithmeticError):
    exit_code = 4


class DegenerateStreamError(NumericFailure):
    """All reconstruction errors of a stream are zero, so normalization is undefined."""


class IngestionError(StcError, OSError):
    pass


class CheckpointError(StcError):
    pass


class ZeroReadWarning(UserWarning):
    """Every memory addressing weight was shrunk to zero; the read returns the zero vector."""
