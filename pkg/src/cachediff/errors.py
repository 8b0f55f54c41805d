"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration or malformed input file.  CLI exit code 1."""


class InvariantError(Exception):
    """A runtime invariant was violated.  CLI exit code 2."""


class CacheMissError(InvariantError):
    """A cached feature was required but absent."""
