"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/input problems exit 2,
numerical failures during training exit 3.
"""


class SilsegError(Exception):
    """Base class for all package-specific errors."""


class VolumeFormatError(SilsegError):
    """File is not a readable NIfTI-1 single-frame image."""


class UnsupportedShapeError(SilsegError):
    """Volume geometry outside what the pipeline supports."""


class DegenerateInputError(SilsegError):
    """Input is formally valid but numerically unusable (e.g. constant volume)."""


class CatalogError(SilsegError):
    """Manifest violates the catalog schema or its invariants."""


class ConfigurationError(SilsegError):
    """User-supplied configuration is invalid or incomplete."""


class ContractError(SilsegError):
    """Arguments violate an operation's shape or value contract."""


class TrainingError(SilsegError):
    """Numerical failure during optimization (non-finite loss or gradient)."""


class EvaluationError(SilsegError):
    """Evaluation cannot produce a result from the given inputs."""


class InsufficientDataError(EvaluationError):
    """Too few usable observations for a statistical test."""
