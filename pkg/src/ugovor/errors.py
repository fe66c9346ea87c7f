"""Exception hierarchy shared by every UgoVor component."""


class UgoVorError(Exception):
    """Base class for all errors raised by this package."""


class ProtocolViolation(UgoVorError):
    """A peer sent something the protocol does not allow."""
