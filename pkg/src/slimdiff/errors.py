"""Exception taxonomy shared by every module.

Exit-code mapping for the CLI lives here so library code never imports
the CLI: usage/configuration mistakes exit 2, runtime failures exit 1.
"""


class SlimdiffError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(SlimdiffError):
    """Invalid configuration value or file."""

    exit_code = 2


class UsageError(SlimdiffError):
    """Operation invoked with arguments that violate its contract."""

    exit_code = 2


class DimensionError(SlimdiffError):
    """Tensor shape incompatible with the operation."""


class ValidationError(SlimdiffError):
    """Input values violate an invariant (non-finite, not one-hot, ...)."""


class SpecError(ConfigurationError):
    """U-Net spec fails structural validation."""


class PruningError(SpecError):
    """Spec cannot be pruned further."""


class TransferError(SlimdiffError):
    """Weight transfer hit an incompatible parameter."""


class FormatError(SlimdiffError):
    """On-disk artifact is corrupt or has the wrong version."""


class DatasetError(UsageError):
    """Dataset tree is missing or malformed."""


class VocabularyError(UsageError):
    """Prompt or class name not present in the conditioning vocabulary."""


class NumericalError(SlimdiffError):
    """Numerical routine left its supported regime."""
