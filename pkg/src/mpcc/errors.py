"""Exception types shared across the package."""


class MPCCError(Exception):
    """Base class; ``kind`` is the machine-readable error code used by the CLI."""

    kind = "error"


class ConfigError(MPCCError, ValueError):
    kind = "config"


class InputError(MPCCError, ValueError):
    kind = "input"


class GenerationError(MPCCError, RuntimeError):
    kind = "generation"


class NumericalError(MPCCError, FloatingPointError):
    kind = "numerical"
