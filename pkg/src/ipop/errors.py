"""Exception hierarchy shared across the package."""


class IpopError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(IpopError):
    """A byte sequence failed to parse as the expected structure."""


class Truncated(DecodeError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class WrongType(DecodeError):
    pass


class BadLength(DecodeError):
    pass


class BadChecksum(DecodeError):
    pass


class OddLength(IpopError):
    """Checksum input must cover an even number of bytes."""


class Oversize(IpopError):
    """Payload exceeds the channel or envelope MTU."""


class ChannelClosed(IpopError):
    pass


class JoinTimeout(IpopError):
    """Bootstrap peer never answered within the retry budget."""


class StoreTimeout(IpopError):
    pass


class LookupTimeout(IpopError):
    pass


class NotFound(IpopError):
    pass


class ConfigError(IpopError):
    """Scenario configuration rejected; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
