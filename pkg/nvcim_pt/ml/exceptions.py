"""Error hierarchy shared by the simulation modules.

Argument errors subclass ValueError and state errors subclass RuntimeError so that
callers which only know the builtin types still catch them.
"""


class NVCiMError(Exception):
    """Base class for every simulator error"""


class ConfigurationError(NVCiMError, ValueError):
    """Invalid argument, shape or configuration value"""


class StateError(NVCiMError, RuntimeError):
    """Operation not allowed in the current state (empty store, buffer not full, ...)"""


class CapacityError(StateError):
    """The crossbar store has no room left for another entry"""


class StorageFormatError(NVCiMError, IOError):
    """A persisted container is malformed or truncated"""
