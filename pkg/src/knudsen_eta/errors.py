"""Exception hierarchy shared by all pipelines."""


class KnudsenError(Exception):
    """Base class for errors raised by this package."""


class InvalidFamilyParams(KnudsenError, ValueError):
    pass


class DegenerateFlat(KnudsenError):
    """Shape matrix requested for a cell whose flatness is (numerically) zero."""


class MaxBounceExceeded(KnudsenError):
    pass


class NumericalStall(KnudsenError):
    pass


class MultiBounceDetected(KnudsenError):
    pass


class GrazingRay(KnudsenError):
    pass


class TrajectoryCap(KnudsenError):
    pass


class MismatchedChannel(KnudsenError, ValueError):
    pass


class InsufficientLength(KnudsenError, ValueError):
    pass


class TruncationNotConverged(KnudsenError):
    pass


class OutOfRegime(KnudsenError, ValueError):
    pass


class SingularOperator(KnudsenError):
    pass


class SpectrumOutOfRange(KnudsenError):
    pass


class TraceFailureRate(KnudsenError):
    """Too many rays failed while building a transition matrix."""


class ConfigInvalid(KnudsenError, ValueError):
    pass
