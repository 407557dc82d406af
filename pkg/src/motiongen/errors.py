"""Error taxonomy shared across the pipeline."""


class MotionGenError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MotionGenError):
    """Bad or missing configuration (paths, split files, invalid settings)."""


class DataError(MotionGenError):
    """Corrupt or inconsistent dataset contents."""


class DomainError(MotionGenError, ValueError):
    """Precondition violation on an operation's inputs."""


class ParseError(MotionGenError):
    """Model answer text could not be parsed into motion tokens."""

    def __init__(self, message, raw_text=None, position=None):
        super().__init__(message)
        self.raw_text = raw_text
        self.position = position


class TrainingError(MotionGenError):
    """Training diverged or could not proceed."""


class GenerationError(MotionGenError):
    """Generation pipeline failed after sampling."""

    def __init__(self, message, raw_answer=None):
        super().__init__(message)
        self.raw_answer = raw_answer
