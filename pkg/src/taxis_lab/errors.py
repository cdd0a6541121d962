"""Exception hierarchy for the taxis lab.

Every error carries the process exit code the CLI reports for it:
1 = config, 2 = numerical failure, 3 = audit failure, 4 = I/O.
"""


class DGTError(Exception):
    """Base class for all errors raised by the package."""

    exit_code: int = 2


class ConfigError(DGTError):
    """Invalid, incomplete or unknown configuration."""

    exit_code = 1


class InitialDataError(ConfigError):
    """Initial data outside the admissible classes."""


class NumericalError(DGTError):
    """A numerical operation could not be carried out."""

    exit_code = 2


class FieldError(NumericalError):
    """A field violates its contract (non-finite, sign, no-flux)."""


class PositivityViolation(NumericalError):
    """An explicit update produced a nonpositive population value."""


class SolverStagnation(NumericalError):
    """The linear solve for the nutrient did not converge."""


class BlowupDetected(NumericalError):
    """The population exceeded the blow-up threshold."""


class AmbiguousCaseError(NumericalError):
    """The degeneracy exponent sits too close to a case boundary."""


class UnsatisfiableInequality(NumericalError):
    """No value of the fitted constant can satisfy a sample."""


class AuditFailure(DGTError):
    """One or more enabled audits failed."""

    exit_code = 3


class PersistenceError(DGTError):
    """Reading or writing an artifact failed."""

    exit_code = 4
