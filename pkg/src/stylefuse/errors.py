"""Error taxonomy shared across the package.

Exit-code mapping lives in the CLI: usage/vocabulary problems exit 1,
I/O problems exit 2, numeric and invariant failures exit 3.
"""


class StylefuseError(Exception):
    """Base class for all package errors."""


class DimensionError(StylefuseError, ValueError):
    """Shape or dimension mismatch between operands."""


class ContractError(StylefuseError, ValueError):
    """A documented precondition was violated (bad range, bad argument)."""


class NumericError(StylefuseError, ArithmeticError):
    """Non-finite values or numerically invalid results."""


class VocabularyError(StylefuseError, ValueError):
    """A caption token is not in the model vocabulary."""


class TrainingError(StylefuseError, RuntimeError):
    """Training diverged or otherwise failed; carries the step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class InvariantError(StylefuseError, RuntimeError):
    """A hard internal invariant was violated (e.g. a frozen parameter moved)."""


class CheckpointError(StylefuseError, IOError):
    """Checkpoint file missing, truncated, or failed its integrity check."""


class ConfigError(StylefuseError, ValueError):
    """Unknown or malformed run-configuration key/value."""
