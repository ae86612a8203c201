"""Exception hierarchy shared by all arqkey modules."""


class ArqKeyError(Exception):
    """Base class for every error raised by this package."""


class Unreachable(ArqKeyError):
    """No finite packet count reaches the requested security level."""


class TooLarge(ArqKeyError):
    """Exhaustive enumeration requested beyond the supported size."""


class DegenerateTrace(ArqKeyError):
    """Arrival trace has fewer than two distinct packet indices."""


class NoConvergence(ArqKeyError):
    """Robust schedule fit did not reach a fixed point."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class SessionAbort(ArqKeyError):
    """Bob refuses to announce: too few usable packets."""

    def __init__(self, message, retriable=False):
        super().__init__(message)
        self.retriable = retriable


class MissingPayload(ArqKeyError):
    """An announced index has no payload in the local store."""


class IntegrityError(ArqKeyError):
    """Packet failed framing or CRC verification."""


class TransportError(ArqKeyError):
    """Socket-level failure in live mode."""


class SocketError(TransportError):
    """Could not bind, connect or send."""


class ProtocolViolation(TransportError):
    """Malformed or unexpected public-channel message."""


class ReceiveTimeout(TransportError):
    """Burst end was never observed."""
