"""Exception hierarchy shared by every composerlab module."""


class ComposerLabError(Exception):
    """Base class for all library errors."""


class DimensionError(ComposerLabError, ValueError):
    pass


class DegenerateMaskError(ComposerLabError, ValueError):
    pass


class ContractError(ComposerLabError, ValueError):
    pass


class NumericError(ComposerLabError, ArithmeticError):
    pass


class TrainingAbort(ComposerLabError, RuntimeError):
    """Raised when an optimizer sees a non-finite gradient or loss."""


class ConfigError(ComposerLabError, ValueError):
    pass


class ScheduleError(ComposerLabError, ValueError):
    pass


class DataError(ComposerLabError, ValueError):
    pass


class StateError(ComposerLabError, RuntimeError):
    pass


class IntegrityError(ComposerLabError, RuntimeError):
    """A frozen tensor changed when it must not have."""


class CheckpointError(ComposerLabError, IOError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingPrerequisite(ComposerLabError, FileNotFoundError):
    """A pipeline stage needs an artifact that has not been produced yet."""

    def __init__(self, message: str, hint: str = ""):
        super().__init__(message)
        self.hint = hint
