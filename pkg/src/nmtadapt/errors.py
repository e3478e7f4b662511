"""Exception hierarchy shared by every module.

Each error class carries the CLI exit status it maps to.
"""


class NmtAdaptError(Exception):
    exit_code = 1


class ConfigError(NmtAdaptError):
    """Invalid configuration or a missing prerequisite artifact."""

    exit_code = 2


class DataError(NmtAdaptError):
    """Input data cannot support the requested operation."""

    exit_code = 3


class FormatError(NmtAdaptError):
    """A file does not follow its declared format."""

    exit_code = 4


class IntegrityError(FormatError):
    """A persisted artifact failed its checksum."""


class ContractError(NmtAdaptError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError, ValueError):
    """Tensor shapes are incompatible."""
