"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class DetEnsembleError(Exception):
    exit_code = 1
    kind = "error"


class ValidationError(DetEnsembleError, ValueError):
    """Input data or configuration violates a documented invariant."""

    exit_code = 1
    kind = "validation"


class StorageError(DetEnsembleError, OSError):
    exit_code = 2
    kind = "io"


class NumericalError(DetEnsembleError, ArithmeticError):
    """Degenerate normalisation, divergence, or another numeric failure."""

    exit_code = 3
    kind = "numerical"
