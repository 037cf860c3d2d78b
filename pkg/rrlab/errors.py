"""Exception hierarchy shared by every rrlab module."""


class RRLabError(Exception):
    pass


class InvalidArgumentError(RRLabError, ValueError):
    pass


class SplitError(InvalidArgumentError):
    pass


class ConfigError(RRLabError, ValueError):
    pass


class ParseError(RRLabError, ValueError):
    """Malformed input file. ``location`` is a line number or byte offset."""

    def __init__(self, message: str, location: int | None = None):
        super().__init__(message)
        self.location = location


class VersionError(ParseError):
    pass


class EvaluationError(RRLabError):
    pass


class TrainingError(RRLabError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} (epoch {epoch}, step {step})")
        self.epoch = epoch
        self.step = step


class AttackError(RRLabError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (attack step {step})")
        self.step = step


class VerificationError(RRLabError):
    pass
