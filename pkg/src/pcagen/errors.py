"""Exception hierarchy for the pipeline.

Every error raised on purpose derives from PcagenError so the CLI can map
failures onto its exit-code contract without enumerating call sites.
"""


class PcagenError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(PcagenError):
    """Invalid or inconsistent configuration value."""


class DataError(PcagenError):
    """Base for problems with input data or stored artifacts."""


class MissingFile(DataError):
    pass


class SchemaError(DataError):
    """Manifest or config JSON does not have the expected structure."""


class DuplicateEntry(DataError):
    pass


class CorruptTensor(DataError):
    """Tensor file failed magic/version/size validation."""


class IoError(DataError):
    """Read or write failed at the filesystem level."""


class InvariantViolation(DataError):
    """Loaded or constructed value breaks a type invariant."""


class DimensionMismatch(DataError):
    """Arrays that must share a shape do not."""


class DimensionError(DataError):
    """Single array has the wrong rank or extent."""


class ShapeError(DataError):
    """Operand shapes incompatible for the requested operation."""


class ChannelCountError(DataError):
    """Wrong number of image planes for the requested operation."""


class GeometryMismatch(DataError):
    """Image does not match the pad geometry it is paired with."""


class DegenerateInput(DataError):
    """Input carries no usable signal (e.g. constant image)."""


class NumericalError(DataError):
    """Numerical routine left its validity envelope (non-PSD matrix etc.)."""


class FingerprintError(PcagenError):
    """Checkpoint fingerprint does not match the expected base."""


class InsufficientData(PcagenError):
    """Fewer samples than the operation needs."""
