class SimulationError(Exception):
    """Raised when the simulation encounters an error."""

    def __init__(self, message):
        super().__init__(message)
        self.message = message


class ShapeMismatchError(SimulationError):
    """Operands or batches do not have the expected lengths."""


class NonFiniteError(SimulationError):
    """A NaN or Inf was produced or received."""


class ConfigError(SimulationError):
    """The experiment configuration is malformed."""


class AlgorithmError(SimulationError):
    """A local or server algorithm could not run."""


class DataError(SimulationError):
    """A dataset could not be generated or loaded."""


class InvalidArgumentError(SimulationError, ValueError):
    """A numeric argument lies outside its valid range."""
