"""Exception hierarchy shared by all fusionpaint modules.

The CLI maps each class to a fixed process exit code, so harness scripts can
tell configuration problems apart from corrupt files.
"""


class FusionPaintError(Exception):
    exit_code = 1


class ConfigError(FusionPaintError, ValueError):
    """Invalid parameters or mismatched configuration."""

    exit_code = 2


class GenerationError(FusionPaintError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""

    exit_code = 3


class DataError(FusionPaintError, ValueError):
    """Malformed or non-finite input data."""

    exit_code = 4


class ShapeError(FusionPaintError, ValueError):
    """Tensor or class-count mismatch between checkpoint and data."""

    exit_code = 5


class ContractError(FusionPaintError, ValueError):
    """A caller violated an operation's precondition (empty set, non-scalar loss)."""


class TrainingError(FusionPaintError, RuntimeError):
    """Training diverged (non-finite loss)."""
