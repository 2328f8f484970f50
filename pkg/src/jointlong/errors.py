"""Exception taxonomy shared across the package.

The command line maps these onto exit codes, so library code should
raise the most specific class that applies rather than bare ValueError.
"""


class JointlongError(Exception):
    """Base class for all package errors."""


class ConfigError(JointlongError):
    """Invalid configuration, arguments, or model definition."""


class DataError(JointlongError):
    """Malformed or internally inconsistent input data."""


class NumericError(JointlongError):
    """Numerical failure during estimation or sampling."""


class DomainError(NumericError):
    """A likelihood was evaluated outside its domain.

    Signals a diverged optimization step; the inner line search catches
    this and backtracks.
    """


class DegenerateCovarianceError(NumericError):
    """A covariance matrix stayed non positive definite after jitter."""
