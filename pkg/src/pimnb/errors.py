"""Exception types shared across the package.

Every failure mode callers are expected to handle has its own class so tests
and CLI error reporting can distinguish them without string matching.
"""


class PimnbError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PimnbError):
    """Operands have incompatible shapes."""


class InvalidShapeError(ShapeError):
    """A tensor was constructed with an empty shape or a non-positive dim."""


class EmptyReductionError(PimnbError):
    """A statistic was requested over zero elements."""


class InsufficientBatchError(PimnbError):
    """A statistics-updating mode needs at least two samples per batch."""


class CorruptedStateError(PimnbError):
    """Persistent normalization state violates its invariants (e.g. var < 0)."""


class ModelFormatError(PimnbError):
    """Base class for model-file load failures."""


class MagicError(ModelFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(ModelFormatError):
    """File declares an unsupported format version."""


class TruncationError(ModelFormatError):
    """File ended before the declared structure was complete."""


class ChecksumError(ModelFormatError):
    """Trailing CRC32 does not match the file contents."""


class EmptyDataError(PimnbError):
    """An operation requiring data received an empty dataset."""


class InvalidMomentsError(PimnbError):
    """A moment update received a negative variance."""


class UnknownLayerError(PimnbError):
    """A layer id does not reference a suitable layer of the model."""


class HistogramAlignmentError(PimnbError):
    """Two histograms do not share identical bin edges."""


class TrainerStateError(PimnbError):
    """Backward was invoked without a matching cached forward pass."""


class TrainingDivergedError(PimnbError):
    """Loss became NaN/Inf; carries the epoch and batch index."""

    def __init__(self, epoch: int, batch_index: int):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")


class DatasetParseError(PimnbError):
    """Base class for dataset file parse failures."""


class DataMagicError(DatasetParseError):
    """Dataset file has the wrong magic number."""


class DataCountMismatchError(DatasetParseError):
    """Image and label files disagree on the number of records."""


class DataTruncationError(DatasetParseError):
    """Dataset file is shorter than its header or record size implies."""


class LabelError(DatasetParseError):
    """A label value is outside the valid class range."""


class InvalidTransformError(PimnbError):
    """A dataset transform received invalid parameters (e.g. zero std)."""


class ConfigError(PimnbError):
    """A run configuration is invalid; the message names the offending key."""
