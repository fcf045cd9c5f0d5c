"""Exception types shared across the package."""


class TshmError(Exception):
    """Base class for all library errors."""


class ShmError(TshmError):
    """Shared-memory region lifecycle failure (create/attach/grow/unlink)."""


class ProtocolError(TshmError):
    """Handshake misuse: illegal status transition, corrupt flag cell,
    or an operation issued out of session order."""


class HandshakeTimeout(TshmError):
    """A wait on the flag cell expired.

    Attributes:
        last_status: the status observed when the wait gave up.
    """

    def __init__(self, msg, last_status):
        super().__init__(msg)
        self.last_status = last_status


class PeerError(TshmError):
    """The peer signaled ERROR through the flag cell.

    Attributes:
        code: the peer-reported error code (see handshake.ERR_*).
    """

    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


class MetadataError(TshmError):
    """Session metadata file is missing keys, malformed, or inconsistent."""


class ValidationError(TshmError):
    """Published session data failed consumer-side validation.

    Attributes:
        code: handshake error code the consumer signaled (or would signal).
        partition: index of the offending partition, when applicable.
    """

    def __init__(self, msg, code, partition=None):
        super().__init__(msg)
        self.code = code
        self.partition = partition


class LayoutError(TshmError):
    """Sparse-domain misuse, e.g. storing a value at a coordinate that was
    never added."""


class TnsFormatError(ValueError):
    """Malformed .tns text input."""
