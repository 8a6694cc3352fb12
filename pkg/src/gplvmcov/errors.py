"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid user input: malformed files, bad configuration, infeasible constraints."""


class FormatError(ValidationError):
    """Unparseable input file; message carries row/column context."""


class NumericalError(RuntimeError):
    """A numerical operation failed beyond recovery (e.g. factorization at max jitter)."""


class FitError(NumericalError):
    """Every variational restart failed; message carries per-restart diagnostics."""
