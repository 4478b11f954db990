"""Shared exception types and process exit codes."""


class StructureError(ValueError):
    """Two parameter trees (or a tree and a model layout) do not line up."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class NumericsError(RuntimeError):
    """A run produced a non-finite quantity it cannot recover from."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_IO = 4
