"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for all simulator-raised errors."""


class ConfigError(SimulationError):
    """Scenario configuration is invalid (CLI exit code 1)."""


class InvariantError(SimulationError):
    """A runtime protocol invariant was violated (CLI exit code 2)."""


class PastEventError(SimulationError):
    """An event was scheduled before the current clock, which signals a logic bug."""


class IndexOutOfGridError(SimulationError):
    """Subchannel or PRB index outside the configured resource grid."""


class OversizedTbError(SimulationError):
    """Transport block does not fit into one subframe across all subchannels."""


class EmptySelectionWindowError(SimulationError):
    """No usable subframe in the selection window (window empty or past deadline)."""


class GrantDeniedError(SimulationError):
    """Central scheduler found no feasible resource for a grant request."""


class ConnectionRefused(SimulationError):
    """Logical-connection table exhausted its identifier space."""
