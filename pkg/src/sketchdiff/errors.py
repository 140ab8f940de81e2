"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid model/schedule/dataset configuration."""


class ContractViolation(ValueError):
    """An operation was called with arguments breaking its preconditions."""


class InputError(ValueError):
    """Malformed runtime input (bad ids, empty lists, out-of-range values)."""


class StateError(RuntimeError):
    """Operation requires state (trained weights, loaded checkpoints) that is absent."""


class GenerationError(RuntimeError):
    """Reverse diffusion produced non-finite values."""


class TrainingFailure(RuntimeError):
    """Training diverged; carries the last finite checkpoint when available."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
