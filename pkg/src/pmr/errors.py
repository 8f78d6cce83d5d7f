"""Exception hierarchy shared across the pipeline."""


class PMRError(Exception):
    """Base class for all pipeline errors."""


class MalformedFile(PMRError):
    pass


class MultiActorFile(PMRError):
    pass


class Rejected(PMRError):
    """Raised when a recording is too corrupt to repair."""


class NoValidPairs(PMRError):
    pass


class ShapeMismatch(PMRError, ValueError):
    pass


class InvalidConfig(PMRError, ValueError):
    pass


class LabelOutOfRange(PMRError, ValueError):
    pass


class MissingChainLength(PMRError, KeyError):
    pass


class MissingTerm(PMRError, KeyError):
    pass


class DataExhausted(PMRError):
    pass


class Divergence(PMRError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class CorruptCheckpoint(PMRError):
    pass


class VersionMismatch(PMRError):
    pass


class EmptyDummyPool(PMRError):
    pass


class ManifestMismatch(PMRError):
    pass


class InsufficientData(PMRError):
    pass


class LabelMismatch(PMRError, ValueError):
    pass


class IndexOutOfRange(PMRError, IndexError):
    pass
