"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see `videobg.cli`):
validation errors mean the caller handed us something malformed, integrity
errors mean stored data failed its own consistency checks, anything else
is a runtime failure.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition (shape, range, config)."""


class IntegrityError(RuntimeError):
    """Stored data (dataset record, checkpoint) is corrupt or truncated."""
