"""Exception hierarchy shared by all idpr modules."""


class IDPRError(Exception):
    """Base class for every error raised by this package."""


class GraphError(IDPRError, ValueError):
    pass


class CycleError(GraphError):
    pass


class DisconnectedError(GraphError):
    pass


class IndexRangeError(GraphError):
    pass


class OutOfBoundsError(IDPRError, IndexError):
    """A pose location falls outside the score-map grid."""


class InvalidTypeError(IDPRError, ValueError):
    """A relation type index is not valid for its directed edge."""


class ConcavityError(IDPRError, ValueError):
    """A quadratic coefficient that must be strictly negative is not."""


class ModeMismatchError(IDPRError, ValueError):
    pass


class EmptyMaskError(IDPRError, ValueError):
    pass


class InstanceTooLargeError(IDPRError, ValueError):
    pass


class DegenerateClusteringError(IDPRError, ValueError):
    pass


class LabelError(IDPRError, ValueError):
    pass


class ScoreMapFormatError(IDPRError, ValueError):
    pass


class BadMagicError(ScoreMapFormatError):
    pass


class VersionMismatchError(ScoreMapFormatError):
    pass


class TruncatedPayloadError(ScoreMapFormatError):
    pass


class ChannelTableError(ScoreMapFormatError):
    pass


class DatasetError(IDPRError, ValueError):
    pass


class ConfigError(IDPRError, ValueError):
    pass
