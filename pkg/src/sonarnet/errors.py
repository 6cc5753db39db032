"""Exception hierarchy shared by all sonarnet modules."""


class SonarNetError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SonarNetError, ValueError):
    """Invalid configuration value or unknown option."""


class ArgumentError(SonarNetError, ValueError):
    """Bad argument to a processing function (empty input, shape mismatch)."""


class DecodeError(SonarNetError, ValueError):
    """A byte payload does not match the layout it claims to have."""


class ProtocolError(SonarNetError):
    """Base class for wire framing problems."""


class FramingError(ProtocolError):
    """Bytes at the read position do not start a valid frame."""


class IntegrityError(ProtocolError):
    """A complete frame was read but its CRC does not verify."""


class NeedMoreData(ProtocolError):
    """The buffer holds only part of a frame; nothing was consumed."""


class SubscriptionError(ProtocolError):
    """The central node refused a subscription (for example in storage mode)."""
