"""Exception hierarchy shared by every stage of the pipeline."""


class AVFusionError(Exception):
    """Base class for all errors raised by this package."""


class DataError(AVFusionError):
    """Bad or unusable input data (maps to CLI exit code 2)."""


class NumericError(AVFusionError):
    """A numerical gate or decomposition failed (maps to CLI exit code 3)."""


# audio front-end
class UnsupportedFormat(DataError):
    pass


class CorruptHeader(DataError):
    pass


class EmptyAudio(DataError):
    pass


class EmptyAfterVad(DataError):
    pass


class TooShort(DataError):
    pass


class InsufficientFrames(DataError):
    pass


class InvalidRange(AVFusionError, ValueError):
    pass


class DegenerateRange(AVFusionError):
    pass


# neural core
class ShapeMismatch(AVFusionError, ValueError):
    pass


class InvalidLabel(AVFusionError, ValueError):
    pass


class LabelOutOfRange(InvalidLabel):
    pass


class EmptyDataset(DataError):
    pass


class InvalidSpec(AVFusionError, ValueError):
    pass


# embeddings / files
class CorruptFile(DataError):
    pass


class DimMismatch(DataError, ValueError):
    pass


class InvalidConfig(AVFusionError, ValueError):
    pass


# fusion
class UtteranceMismatch(DataError):
    pass


class EmptyVector(DataError):
    pass


class NotAPosterior(DataError, ValueError):
    pass


class InvalidLayout(AVFusionError, ValueError):
    pass


class OutOfConfiguredRange(AVFusionError, ValueError):
    pass


# verification / evaluation
class DegenerateClasses(DataError):
    pass


class SingularCovariance(NumericError):
    pass


class EmptyPopulation(DataError):
    pass


class InsufficientUtterances(DataError):
    pass


class EmptyMatrix(DataError):
    pass
