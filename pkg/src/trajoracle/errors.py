"""Exception hierarchy shared by all modules."""


class TrajOracleError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ConfigError(TrajOracleError, ValueError):
    pass


class NormalizationError(TrajOracleError, ValueError):
    pass


class ParseError(TrajOracleError, ValueError):
    pass


class ShapeError(TrajOracleError, ValueError):
    pass


class NonFiniteError(TrajOracleError, FloatingPointError):
    pass


class ArchiveError(TrajOracleError, ValueError):
    pass


class ProviderError(TrajOracleError, RuntimeError):
    pass


class LeakageError(TrajOracleError, RuntimeError):
    """A held-out subject reached a training path or an archive."""

    def __init__(self, subject_id, where="training"):
        super().__init__(f"held-out subject {subject_id!r} found in {where}")
        self.subject_id = subject_id
