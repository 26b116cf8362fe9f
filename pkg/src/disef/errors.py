"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes (2 config/data, 3 backend, 4 exhaustion).
"""


class DisefError(Exception):
    exit_code = 1


class InputError(DisefError, ValueError):
    exit_code = 2


class ConfigError(DisefError, ValueError):
    exit_code = 2


class DataError(DisefError, ValueError):
    exit_code = 2


class StateError(DisefError, RuntimeError):
    pass


class StructuralError(DisefError, TypeError):
    pass


class FormatError(DisefError, ValueError):
    exit_code = 2


class ProtocolError(DisefError, ValueError):
    exit_code = 2


class NumericalError(DisefError, ArithmeticError):
    pass


class BackendError(DisefError, RuntimeError):
    """A generator/captioner backend failed; the call may be retried."""

    exit_code = 3
    retryable = True


class GenerationExhaustedError(DisefError, RuntimeError):
    """Raised when a class cannot reach its synthetic quota within the attempt cap."""

    exit_code = 4

    def __init__(self, class_label, kept, target, attempts):
        self.class_label = class_label
        self.kept = list(kept)
        self.target = target
        self.attempts = attempts
        super().__init__(
            f"class {class_label!r}: kept {len(self.kept)}/{target} samples "
            f"after {attempts} attempts (shortfall {target - len(self.kept)})"
        )


class TrainingDivergedError(DisefError, RuntimeError):
    def __init__(self, message, snapshot_path=None):
        self.snapshot_path = snapshot_path
        super().__init__(message)
