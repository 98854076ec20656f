"""Exception hierarchy shared across the package.

Every error raised by library code derives from PlayercapError so the CLI
can map error classes onto distinct exit codes.
"""


class PlayercapError(Exception):
    """Base class for all package errors."""


# ---- tensor / numeric contracts ----

class ShapeMismatch(PlayercapError):
    """Operand shapes violate an operation's contract."""


class DegenerateRow(PlayercapError):
    """Layer norm requested over a single-element row."""


class InvalidRate(PlayercapError):
    """Dropout rate outside [0, 1)."""


class OddWidth(PlayercapError):
    """Sinusoidal position table needs an even width."""


class NonScalarLoss(PlayercapError):
    """backward() called on a non-scalar tensor."""


# ---- identity / captioning contracts ----

class EmptySequence(PlayercapError):
    """Player sequence with no frames."""


class LabelOutOfRange(PlayercapError):
    """Class label outside [0, n_classes)."""


class EmptyInput(PlayercapError):
    """Metric or accuracy computation over zero items."""


class MissingSequence(PlayercapError):
    """A named player has no stored sequence."""


# The identity-embedding builder reports the same condition under a
# plural name at its own call sites.
MissingSequences = MissingSequence


class UnknownToken(PlayercapError):
    """Token absent from the vocabulary."""


class LengthCapExceeded(PlayercapError):
    """Decoder prefix longer than the configured cap."""


class InconsistentFlags(PlayercapError):
    """Mutually exclusive ablation flags."""


class EmptyCorpus(PlayercapError):
    """Evaluation requested over an empty pair list."""


# ---- data / persistence ----

class SchemaError(PlayercapError):
    """Annotation record violates the file schema."""


class DuplicateVideoId(PlayercapError):
    """Two records share a video_id."""


class UncoveredGame(PlayercapError):
    """Split spec does not cover a game present in the data."""


class ConfigError(PlayercapError):
    """Invalid hyperparameter or generator configuration."""


class VersionMismatch(PlayercapError):
    """Checkpoint or archive written by an incompatible format version."""


class CorruptFile(PlayercapError):
    """Truncated file, bad magic, or checksum failure."""


class DataError(PlayercapError):
    """Dataset unusable for the requested command."""


class MissingCheckpoint(PlayercapError):
    """Command requires a checkpoint that was not supplied or found."""


class AlignmentError(PlayercapError):
    """Candidate and reference files disagree on video ids."""
