"""Structured error types shared across the package."""


class BslError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BslError):
    """Shape or extent mismatch; the message names the offending shapes."""


class DataError(BslError):
    """Invalid tensor contents, labels, or dataset files."""


class ConfigError(BslError):
    """Invalid or inconsistent configuration values."""


class DecodeError(BslError):
    """Malformed frame or message bytes."""


class ProtocolStateError(BslError):
    """A protocol call arrived in a state that does not permit it."""


class TransportError(BslError):
    """The byte stream closed or timed out underneath the protocol."""


class HandshakeError(BslError):
    """Client/server configuration disagreement during session sync."""
