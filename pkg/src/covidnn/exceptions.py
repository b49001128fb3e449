"""Exception hierarchy shared by every module of the package."""


class CovidNNError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CovidNNError, ValueError):
    pass


class InvalidArchitectureError(CovidNNError, ValueError):
    pass


class LayerStateError(CovidNNError, RuntimeError):
    """Raised when backward is called without a matching forward."""


class UninitializedStatisticsError(CovidNNError, RuntimeError):
    """Batch normalization used for inference before any running statistics exist."""


class DivergenceError(CovidNNError, FloatingPointError):
    pass


class DataError(CovidNNError, ValueError):
    """Unreadable image, bad manifest content or an empty split."""


class ArchiveError(CovidNNError, ValueError):
    pass


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class MissingTensorError(ArchiveError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UnexpectedTensorError(ArchiveError):
    pass


class ShapeMismatchError(ArchiveError):
    pass
