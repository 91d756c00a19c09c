"""Exception types raised across the package."""


class CoopSemError(Exception):
    pass


class ShapeError(CoopSemError, ValueError):
    pass


class DegenerateSymbolError(CoopSemError, ValueError):
    """A symbol block with zero energy cannot be scaled to the power budget."""


class SingularChannelError(CoopSemError, ArithmeticError):
    pass


class EmptyIndexError(CoopSemError, ValueError):
    pass


class ConfigError(CoopSemError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DependencyError(CoopSemError, FileNotFoundError):
    """A required upstream artifact (checkpoint, stage output) is missing."""


class ParseError(CoopSemError, ValueError):
    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path is not None else message)


class PlotError(CoopSemError, ValueError):
    pass


class ConfigWarning(UserWarning):
    pass
