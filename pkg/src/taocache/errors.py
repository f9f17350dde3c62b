"""Exception hierarchy shared by all taocache modules."""


class TaoCacheError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(TaoCacheError):
    """Two arrays that must share a shape do not."""


class ParameterError(TaoCacheError):
    """A parameter is outside its documented domain."""


class TerminalStateError(TaoCacheError):
    """A scheduler step was requested from the terminal state t = 0."""


class UndefinedScoreError(TaoCacheError):
    """The noise predictor is undefined (zero noise level)."""


class TraceIncompleteError(TaoCacheError):
    """A replay backend was asked for a step the trace does not contain."""


class TableMismatchError(TaoCacheError):
    """Calibration tables with incompatible metadata cannot be combined."""


class InfeasibleWindowError(TaoCacheError):
    """No skip window satisfies the constraints; message names the binding one."""


class PlanInvalidError(TaoCacheError):
    """A skip plan is inconsistent with the schedule, table, or loop state."""


class ConfigError(TaoCacheError):
    """A run config file is missing, malformed, or out of range."""


class TraceFormatError(TaoCacheError):
    """Base class for binary trace-file errors."""


class BadMagicError(TraceFormatError):
    """The source does not start with the trace magic bytes."""


class VersionError(TraceFormatError):
    """The trace format version is not supported by this reader."""


class ChecksumError(TraceFormatError):
    """The trailing CRC32 does not match the file contents."""


class TruncatedError(TraceFormatError):
    """The byte stream ends in the middle of a header or record frame."""


class TraceValidationError(TraceFormatError):
    """Decoded records are inconsistent with the trace header."""
