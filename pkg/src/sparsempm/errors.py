"""Exception hierarchy for grid construction, configuration and simulation."""


class SparseMpmError(Exception):
    """Base class for all package errors."""


class KeyRangeError(SparseMpmError, ValueError):
    """A block coordinate falls outside the packable signed range."""


class InactiveNodeError(SparseMpmError, KeyError):
    """A grid node was addressed whose block is not in the active map."""


class ConfigError(SparseMpmError, ValueError):
    """A scenario configuration is missing, malformed or inconsistent."""


class SimulationError(SparseMpmError, RuntimeError):
    """The simulation reached an invalid state and cannot continue."""
