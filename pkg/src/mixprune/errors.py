"""Exception types shared across the package."""


class MixpruneError(Exception):
    """Base class for package errors."""


class ConfigError(MixpruneError):
    """Invalid configuration, missing file, or violated precondition of a command."""


class GraphError(MixpruneError):
    """Invalid or unsupported network topology."""


class LutError(ConfigError):
    """Malformed or incomplete hardware lookup table."""


class DegenerateModelError(MixpruneError):
    """A search or export step produced a layer with no surviving channels."""


class FormatError(MixpruneError):
    """Corrupt or incompatible serialized container."""
