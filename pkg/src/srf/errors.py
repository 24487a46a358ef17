"""Typed errors raised across the package.

Every recoverable failure maps to one of these classes so callers (and the
CLI) can tell bad input from bad state without string matching.  The CLI
prints ``error: <ClassName>: <message>`` and exits 1 for any of them.
"""

from __future__ import annotations


class SrfError(Exception):
    """Base class for all package errors."""


# --- field-core ------------------------------------------------------------

class InvalidField(SrfError):
    """A field violates a structural invariant (negative fluence, ...)."""


class InvalidSpectrum(SrfError):
    """A spectrum histogram is malformed (negative bins, bad count/sum)."""


class DimensionMismatch(SrfError):
    """Array shapes disagree with the declared grid or with each other."""


class NonUnitDirection(SrfError):
    """A direction vector is not normalized within tolerance."""


class EmptyDataset(SrfError):
    """An operation needs at least one field and got none."""


class AllZeroFluence(SrfError):
    """No strictly positive fluence voxel exists; statistic undefined."""


class TooFewFiles(SrfError):
    """split_dataset needs at least three paths."""


class FormatError(SrfError):
    """Base for binary-container failures."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(FormatError):
    """Container version is newer than this implementation understands."""


class TruncatedFile(FormatError):
    """File ends before the declared payload does."""


class ChecksumMismatch(FormatError):
    """Trailing CRC32 does not match the file contents."""


# --- synthgen ---------------------------------------------------------------

class NonPositiveKvp(SrfError):
    """Tube voltage must be positive."""


class BeamMissesVolume(SrfError):
    """The beam axis does not intersect the voxel volume."""


class IoFailure(SrfError):
    """Dataset generation could not write its outputs."""


# --- normalize --------------------------------------------------------------

class AllZero(SrfError):
    """Normalizer fit needs at least one positive value."""


class NegativeInput(SrfError):
    """Normalization input must be non-negative."""


class OutOfRange(SrfError):
    """Denormalization input lies outside the kind's range."""


class NotFitted(SrfError):
    """A normalizer was used before ``fit``."""


class InvalidAlpha(SrfError):
    """Log-normalization strength must be positive."""


# --- nn ---------------------------------------------------------------------

class NegativeBin(SrfError):
    """Spectrum encoder input bins must be non-negative."""


class WidthMismatch(SrfError):
    """Fusion inputs do not match the model width."""


class NonFiniteParameters(SrfError):
    """Model parameters contain NaN or infinity."""


class NoRecordedGraph(SrfError):
    """``backward`` was called on a tensor with no recorded operations."""


class NonScalarBackward(SrfError):
    """``backward`` requires a scalar root."""


class InvalidConfig(SrfError):
    """A model / training / search configuration failed validation."""


# --- evalkit ----------------------------------------------------------------

class GridTooSmall(SrfError):
    """A metric window does not fit into the grid."""


class LengthMismatch(SrfError):
    """Histogram lengths disagree."""


class EmptySelection(SrfError):
    """A voxel selector matched nothing."""


class CriterionSmallerThanVoxel(SrfError):
    """Gamma distance criterion is below one voxel extent."""


# --- trainer ----------------------------------------------------------------

class StepOutOfRange(SrfError):
    """lr_schedule step outside [0, total_steps]."""


class ShapeMismatch(SrfError):
    """Optimizer state/gradient shapes disagree with parameters."""


class EmptySplit(SrfError):
    """A dataset split contains no fields."""


class EmptySpace(SrfError):
    """A hyperparameter search space has an empty axis."""


class DivergedLoss(SrfError):
    """Training loss became non-finite."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = dict(state or {})


class MissingNormalizer(SrfError):
    """A checkpoint carries no normalization spec; predictions would be
    uninterpretable."""


class CheckpointMismatch(SrfError):
    """Checkpoint parameters do not fit the declared architecture."""


# --- cli --------------------------------------------------------------------

class UnimplementedFormat(SrfError):
    """An import format is recognized but intentionally not implemented."""
