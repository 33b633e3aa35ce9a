"""Exception hierarchy shared by every module."""


class JointcastError(Exception):
    """Base class for all package errors."""


class DimensionError(JointcastError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(JointcastError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(JointcastError, ValueError):
    """Invalid configuration value or combination."""


class ValidationError(JointcastError, ValueError):
    """Input data failed validation (coordinates, ids, variances)."""


class DataError(JointcastError, ValueError):
    """Observation data is missing, misordered, or malformed."""
