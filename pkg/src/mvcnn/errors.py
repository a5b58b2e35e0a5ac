"""Exception types shared across the package."""


class MVCNNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MVCNNError, ValueError):
    pass


class ParameterError(MVCNNError, ValueError):
    pass


class ConfigurationError(MVCNNError, ValueError):
    pass


class DegenerateBatchError(MVCNNError, ValueError):
    pass


class LabelError(MVCNNError, ValueError):
    pass


class CorruptCheckpointError(MVCNNError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeError(MVCNNError, ValueError):
    pass


class DatasetError(MVCNNError):
    pass


class SplitError(MVCNNError, ValueError):
    pass


class DecodeError(MVCNNError):
    def __init__(self, path, reason: str = "cannot decode image"):
        super().__init__(f"{reason}: {path}")
        self.path = path


class StaleCacheError(MVCNNError):
    pass


class VocabularyError(MVCNNError):
    pass
