"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: configuration/data problems
exit with 2, numerical failures with 3.
"""


class QhnetError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(QhnetError):
    """Invalid configuration value or out-of-range setting."""


class DomainError(QhnetError):
    """Input outside an operation's mathematical domain."""


class ContractViolation(QhnetError):
    """Caller broke an internal API contract (bad shape, missing path)."""


class DataError(QhnetError):
    """Malformed or inconsistent dataset content."""


class DegenerateGeometryError(QhnetError):
    """Two atoms closer than the supported minimum separation."""


class NotPositiveDefiniteError(QhnetError):
    """Cholesky factorization hit a non-positive pivot."""


class NumericalError(QhnetError):
    """An iterative numerical routine failed to converge or produced
    non-finite values."""


class UnsupportedSystemError(QhnetError):
    """Molecule outside the supported closed-shell H/C/N/O scope."""
