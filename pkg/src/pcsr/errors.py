"""Exception types shared across the package."""


class PcsrError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PcsrError):
    """Operand dimensions are incompatible with an operation's contract."""


class NumericError(PcsrError):
    """Non-finite values or otherwise invalid numerics were encountered."""


class ContractError(PcsrError):
    """A caller violated a documented precondition."""


class ConfigError(PcsrError):
    """Invalid configuration value."""


class FormatError(PcsrError):
    """Malformed on-disk artifact (tensor container, checkpoint, manifest)."""


class OracleError(PcsrError):
    """A test oracle could not produce a trustworthy answer."""


class ReportError(PcsrError):
    """Inconsistent inputs to report aggregation."""
