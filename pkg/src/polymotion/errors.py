"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric failures exit 4.
"""


class PolymotionError(Exception):
    exit_code = 1


class ConfigError(PolymotionError, ValueError):
    exit_code = 2


class DataError(PolymotionError):
    exit_code = 3


class InputError(DataError, ValueError):
    pass


class DimensionError(DataError, ValueError):
    pass


class MotionFormatError(DataError, ValueError):
    pass


class MotionValidationError(MotionFormatError):
    pass


class CheckpointFormatError(DataError, ValueError):
    pass


class VersionError(CheckpointFormatError):
    pass


class VocabularyError(DataError, IndexError):
    pass


class RegistryError(DataError, KeyError):
    def __str__(self):
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class MissingArtifactError(DataError, FileNotFoundError):
    pass


class NumericError(PolymotionError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class SamplingError(NumericError):
    pass
