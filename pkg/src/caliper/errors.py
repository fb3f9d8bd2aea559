"""Exception hierarchy shared by every component of the package."""


class CaliperError(Exception):
    """Base class for all errors raised by this package."""


class EncodingError(CaliperError, ValueError):
    """Malformed canonical encoding."""


class DecodeFailure(CaliperError):
    """The error-correcting decoder could not recover a key with a valid checksum."""


class ModalityUnavailable(CaliperError):
    """No live samples were available for a row's modality."""


class OpenFailure(CaliperError):
    """A sealed envelope failed authentication or was addressed to another key."""


class ProtocolError(CaliperError):
    """Malformed or unexpected protocol message."""


class NeedMoreData(ProtocolError):
    """The byte stream ended before a complete frame was available."""


class StoreCorrupted(CaliperError):
    """Persistent state could not be replayed."""


class LoadFailure(CaliperError):
    """An ASLP image did not reassemble to a checksum-valid program."""


class FormatError(CaliperError, ValueError):
    """An ASLP container is truncated or has a bad header."""


class Rejected(CaliperError):
    """The CAVE refused a request. ``reason`` is one of the verdict codes."""

    def __init__(self, reason, detail=""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail
