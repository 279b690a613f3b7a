"""Exception types shared across the simulator."""


class RabosimError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(RabosimError):
    """Operands have incompatible shapes."""


class NonFiniteValue(RabosimError):
    """A vector or matrix contains NaN or Inf."""


class NotPositiveDefinite(RabosimError):
    """A matrix expected to be SPD failed factorization."""


class MaxIterExceeded(RabosimError):
    """Iterative solver hit its iteration cap.

    Carries the last iterate and its residual so callers can inspect or
    accept a partially converged solution.
    """

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class InvalidSpec(RabosimError):
    """A problem or run specification is malformed."""


class UnsupportedProblem(RabosimError):
    """Operation requires oracle structure the problem does not expose."""


class InvalidCapacity(RabosimError):
    """Client capacity outside (0, 1]."""


class MixedRounds(RabosimError):
    """Coverage computed over masks from different rounds or levels."""


class ZeroNormInput(RabosimError):
    """Mask deviation requested for a zero-norm vector."""


class EmptyMask(RabosimError):
    """Mask has no active coordinate where at least one is required."""


class NonPositiveMu(RabosimError):
    """Finite-difference step must be strictly positive."""


class SingularRestrictedHessian(RabosimError):
    """Inner Hessian restricted to the active block is not SPD.

    Signals a mask that kills strong convexity on the active coordinates.
    """


class DivergenceDetected(RabosimError):
    """Inner iterate norm exceeded the divergence guard.

    ``partial_logs`` holds the round logs accumulated before the abort when
    raised from a full run.
    """

    def __init__(self, message, partial_logs=None):
        super().__init__(message)
        self.partial_logs = partial_logs if partial_logs is not None else []


class MissingBaseline(RabosimError):
    """Cost comparison requested against a variant absent from the sweep."""


class ParseError(RabosimError):
    """Config document is not well-formed; carries line/column when known."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class ValidationError(RabosimError):
    """Config document is well-formed but semantically invalid.

    ``key`` names the offending entry.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
