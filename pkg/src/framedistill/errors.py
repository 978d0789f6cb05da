"""Exception hierarchy shared by all pipeline stages."""


class FrameDistillError(Exception):
    """Base class for every error raised by this package."""


class FormatError(FrameDistillError, ValueError):
    """A file does not follow its binary or text format."""


class TruncationError(FormatError):
    """A file ends before the payload announced by its header."""


class ConsistencyError(FormatError):
    """Header flags or counts disagree with the payload."""


class ConfigError(FrameDistillError, ValueError):
    """A rig or run configuration is missing keys or violates an invariant."""


class ValidationError(FrameDistillError):
    """Input data is well-formed but unusable for the requested stage."""
