"""Exception types shared across the package.

Everything raised deliberately by this package derives from :class:`DpoptError`,
so callers can catch one type at the CLI boundary and still let genuine bugs
(``TypeError``, ``IndexError``, ...) propagate.
"""


class DpoptError(Exception):
    """Base class for all errors raised deliberately by this package."""


class DimensionMismatchError(DpoptError):
    """Array shapes or declared dimensions do not line up."""


class TopologyError(DpoptError):
    """Invalid communication graph or weight matrix."""


class InvalidScheduleError(DpoptError):
    """Step-size or noise schedule parameters outside the admissible range."""


class CertificateError(DpoptError):
    """A run was requested with schedules whose convergence certificate is
    false and no explicit override was given."""


class UnboundedSetError(DpoptError):
    """A norm bound was requested for a set that is not compact."""


class UnsupportedFormError(DpoptError):
    """An operation needs structure (affine maps, quadratic aggregate, box
    domains) that the given objects do not have."""


class SlaterViolationError(DpoptError):
    """The supplied interior point does not strictly satisfy the coupled
    inequality constraints, so the dual-radius formula is undefined."""


class StepTooLargeError(DpoptError):
    """A per-round contraction factor left (0, 1]; the privacy recursion (or
    the step rule that feeds it) is invalid for these schedule values."""


class ConfigError(DpoptError):
    """Malformed experiment configuration (unknown keys, missing sections,
    values of the wrong type or sign)."""
