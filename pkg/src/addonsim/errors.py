"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and validation problems
exit 2, simulation failures exit 3, filesystem problems exit 4.
"""


class AddonSimError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AddonSimError):
    """A value violates a documented precondition. Message names the field."""


class ConfigError(AddonSimError):
    """A scenario or profile document is malformed. Message carries the key path."""


class NotFoundError(AddonSimError):
    """A request references an add-on id missing from the catalog."""


class TraceFormatError(AddonSimError):
    """A trace CSV failed to parse. Message lists offending line numbers."""


class SimulationError(AddonSimError):
    """The simulation itself failed, e.g. the event watchdog tripped."""
