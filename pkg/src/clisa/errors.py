"""Exception hierarchy shared across the package."""


class ClisaError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(ClisaError, ValueError):
    """Shape / dimension contracts violated; message names both shapes."""


class ContractError(ClisaError, ValueError):
    """Non-shape precondition violated (bad label, non-scalar loss, ...)."""


class FormatError(ClisaError, ValueError):
    """Malformed serialized data (CTNS / PGM / manifest)."""


class TrainingAbort(ClisaError, RuntimeError):
    """Non-finite loss during training; message identifies the component."""


class ConvergenceError(ClisaError, RuntimeError):
    """Iterative estimator failed to converge within its iteration budget."""
