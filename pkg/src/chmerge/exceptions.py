"""Exception hierarchy. The CLI maps each class to an exit code."""


class ChannelMergeError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class ShapeMismatchError(ChannelMergeError, ValueError):
    """Checkpoints are not aligned layer-for-layer."""


class TensorFileError(ChannelMergeError, ValueError):
    """A tensor file is malformed or uses an unsupported layout."""


class CorruptBundleError(ChannelMergeError, ValueError):
    """A merged bundle violates one of its invariants."""

    exit_code = 4


class InvalidParameterError(ChannelMergeError, ValueError):
    """A hyper-parameter is outside its admissible range."""

    exit_code = 2
