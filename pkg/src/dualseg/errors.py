"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """An operation received an argument outside its domain."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range."""


class ContractError(ValueError):
    """A component returned or received data violating a shape/value contract."""


class StateError(RuntimeError):
    """An object is not in the state required by the operation."""


class EvaluationError(ValueError):
    """Metrics were requested on an empty or invalid evaluation."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss was produced; ``dump_path`` points at a diagnostic file."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
