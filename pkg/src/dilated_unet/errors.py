"""Exception types shared across the package."""


class DilatedUNetError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(DilatedUNetError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DilatedUNetError, ValueError):
    """A model or training configuration violates its invariants."""


class LabelError(DilatedUNetError, ValueError):
    """A target mask holds a label outside ``[0, num_classes)``."""


class DatasetError(DilatedUNetError):
    """A dataset is empty or inconsistent."""


class PGMError(DilatedUNetError):
    """Base class for PGM decoding failures."""


class PGMFormatError(PGMError):
    """Wrong magic number (only binary ``P5`` is accepted)."""


class PGMHeaderError(PGMError):
    """Malformed or unsupported PGM header."""


class PGMTruncatedError(PGMError):
    """Pixel payload shorter than the header promises."""


class CheckpointError(DilatedUNetError):
    """Base class for checkpoint decoding failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointBoundsError(CheckpointError):
    """Manifest offsets overlap, go backwards, or leave the payload."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor disagrees with the shape the model config expects."""
