"""Exception types shared across the package."""


class RelnetError(Exception):
    """Base class for all package-specific failures."""


class ParseError(RelnetError):
    """Malformed input file; the message carries line or image context."""


class VocabularyError(RelnetError):
    """An annotation names a class or predicate absent from the vocabulary."""


class UnknownClassError(RelnetError):
    """A class name could not be resolved against the embedding table."""


class DegenerateVectorError(RelnetError):
    """A zero-norm vector where a direction is required."""


class DegenerateBoxError(RelnetError):
    """A box with no positive area after clamping."""


class ShapeError(RelnetError):
    """Tensor shapes do not match the declared network dimensions."""


class EmptyDatasetError(RelnetError):
    """Training was requested but no examples could be materialized."""


class GenerationError(RelnetError):
    """A synthetic-world configuration cannot be realized."""


class CheckpointError(RelnetError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the declared dimensions."""


class CheckpointCorruptError(CheckpointError):
    """The checkpoint file is unreadable or structurally invalid."""
