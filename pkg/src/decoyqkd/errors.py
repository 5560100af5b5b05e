"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates one of its invariants."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class BoundValidityError(ValueError):
    """Decoy intensities do not satisfy the preconditions of a bound."""


class NoSinglePhotonError(ArithmeticError):
    """The single-photon gain lower bound is zero, so no QBER bound exists."""


class TruncationError(ValueError):
    """A photon-number truncation leaves too much Poisson tail mass."""


class NoKeyError(ValueError):
    """The secure key rate is not positive where a positive one is required."""


class ProtocolError(Exception):
    """Sifting session failure.

    ``message_type`` is the wire type code of the offending frame, or None when
    the failure happened outside a frame (e.g. the peer hung up).
    """

    def __init__(self, message: str, message_type: int | None = None):
        self.message_type = message_type
        super().__init__(message)
