"""Exception hierarchy shared by all modules."""


class CritFieldError(Exception):
    """Base class for all library errors."""


class InsufficientSmoothness(CritFieldError):
    """A derivative or spectral moment requested beyond the model's smoothness."""


class DegenerateJoint(CritFieldError):
    """A Gaussian vector that must be non-degenerate is (numerically) singular."""


class UnsupportedDimension(CritFieldError):
    """The requested computation has no implementation in this dimension."""


class NonPositiveValues(CritFieldError):
    """A log-log fit was requested on values that are not all positive."""


class LatticeTooLarge(CritFieldError):
    """Exact lattice simulation would exceed the configured size cap."""


class BandwidthRateViolation(CritFieldError):
    """Kernel bandwidth is too small for the lattice refinement."""


class OutOfWindow(CritFieldError):
    """A field was evaluated outside the region where it is defined."""


class DegenerateField(CritFieldError):
    """Too many near-degenerate critical points were met during extraction."""


class EmptyPattern(CritFieldError):
    """An estimator needs at least one point but the pattern is empty."""


class IntegrabilityViolation(CritFieldError):
    """The covariance derivatives are not integrable at infinity."""


class RuntimeCapExceeded(CritFieldError):
    """A long computation ran past its wall-clock budget."""
