"""Exception hierarchy shared by every module."""


class VQSpeechError(Exception):
    """Base class for all errors raised by this package."""


class InputRangeError(VQSpeechError, ValueError):
    pass


class FormatError(VQSpeechError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(VQSpeechError, ValueError):
    pass


class LengthError(VQSpeechError, ValueError):
    def __init__(self, message, required=None):
        self.required = required
        super().__init__(message)


class StateError(VQSpeechError, RuntimeError):
    pass


class DataError(VQSpeechError, ValueError):
    pass


class ConfigError(VQSpeechError, ValueError):
    pass


class PathError(VQSpeechError, FileNotFoundError):
    pass


class TrainingDiverged(VQSpeechError, RuntimeError):
    """Raised when a loss becomes non-finite; carries the last finite state."""

    def __init__(self, update, state):
        self.update = update
        self.state = state
        super().__init__(f"non-finite loss at update {update}")
