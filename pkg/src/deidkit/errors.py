"""Exception hierarchy shared by every deidkit module.

The CLI maps each family to a distinct exit code, so new errors should
subclass one of these rather than ``Exception`` directly.
"""


class DeidError(Exception):
    exit_code = 1


class ConfigurationError(DeidError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    pass


class ProtocolError(DeidError):
    exit_code = 3


class NumericError(DeidError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(NumericError):
    pass


class ExpertQualityError(TrainingError):
    def __init__(self, message, accuracy):
        super().__init__(message)
        self.accuracy = accuracy


class UnsupportedArchitectureError(ConfigurationError):
    pass


class InputError(ConfigurationError):
    pass


class InsufficientSamplesError(DeidError):
    exit_code = 4


class CheckpointError(DeidError, IOError):
    exit_code = 5


class MissingArtifactError(CheckpointError):
    """A file or directory a command depends on does not exist."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass
