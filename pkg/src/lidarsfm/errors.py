"""Exception types raised across the package."""


class LidarSfmError(Exception):
    pass


class NonPositiveDepth(LidarSfmError):
    """A point sits at or behind the camera plane."""


class ParseError(LidarSfmError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingNormals(LidarSfmError):
    pass


class InitializationFailed(LidarSfmError):
    pass


class RegistrationFailed(LidarSfmError):
    pass


class EmptyProblem(LidarSfmError):
    pass


class NumericalFailure(LidarSfmError):
    pass


class SpecError(LidarSfmError):
    pass


class AlignmentError(LidarSfmError):
    pass


class ConfigError(LidarSfmError):
    pass
