"""Exception hierarchy.

Three families map onto CLI exit codes: configuration problems (2), data
problems (3) and numeric problems (4).
"""


class AlignError(Exception):
    exit_code = 1


class ConfigError(AlignError, ValueError):
    exit_code = 2


class DataError(AlignError, ValueError):
    exit_code = 3


class NumericError(AlignError, ArithmeticError):
    exit_code = 4


# numeric core
class NonFiniteError(NumericError):
    pass


class ShapeError(NumericError, ValueError):
    pass


# model
class MissingAudioError(DataError):
    pass


class PoolError(NumericError, ValueError):
    pass


class SequenceTooLongError(DataError):
    pass


class VocabError(DataError):
    pass


# losses / metrics
class ListError(NumericError, ValueError):
    pass


class MaskError(NumericError, ValueError):
    pass


class DegenerateError(NumericError, ValueError):
    pass


class EnsembleError(DataError):
    pass


# data
class ManifestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateIdError(ManifestError):
    pass


class AugmentError(DataError):
    pass


class TeacherCoverageError(DataError):
    pass


class MaskParamError(DataError):
    pass


class CheckpointError(DataError):
    pass
