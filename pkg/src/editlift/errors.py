"""Exception hierarchy shared by all editlift modules.

Every failure mode that callers are expected to handle has its own class;
anything else surfaces as a plain ValueError/TypeError from validation.
"""


class EditliftError(Exception):
    """Base class for all editlift-specific errors."""


class InvariantViolation(EditliftError):
    """A domain-type invariant failed validation (bad shapes, norms, bounds)."""


# --- lift ---------------------------------------------------------------


class DimensionMismatch(EditliftError):
    """Rasters or intrinsics that must share dimensions do not."""


class AllDepthInvalid(EditliftError):
    """A depth map contains no valid pixel to backproject."""


class EmptyMask(EditliftError):
    """An operation requiring a nonempty mask received an empty one."""


class DepthSourceFailure(EditliftError):
    """A depth source raised or returned output at the wrong resolution."""


# --- filter -------------------------------------------------------------


class TooFewPoints(EditliftError):
    """Fewer points than the operation's minimum."""


class EmptyCloud(EditliftError):
    """Operation requires a nonempty point cloud."""


class AllPointsRejected(EditliftError):
    """Filtering removed every point; the object is unusable upstream."""


# --- correspond ---------------------------------------------------------


class NoOverlap(EditliftError):
    """Passive masks are disjoint across states; editing destroyed the static region."""


class TooFewMatches(EditliftError):
    """Fewer feature matches survived thresholding than required."""


# --- register -----------------------------------------------------------


class DegenerateGeometry(EditliftError):
    """Point configuration is rank-deficient (collinear or coincident)."""


class ScaleMismatch(EditliftError):
    """Relative-transform inputs carry different scales; unify first."""


class UnifiedScaleNonPositive(EditliftError):
    """The passive scale is too small to serve as the unified reference."""


# --- grasp --------------------------------------------------------------


class DegenerateInput(EditliftError):
    """Hull input is coplanar/collinear; caller should fall back to a box."""


# --- synth --------------------------------------------------------------


class InvalidNoiseSpec(EditliftError):
    """Noise parameters outside their valid ranges."""


# --- io/cli -------------------------------------------------------------


class MissingFile(EditliftError):
    """A required archive file does not exist."""


class FormatVersionMismatch(EditliftError):
    """On-disk format version differs from what this build reads."""


class PipelineStageError(EditliftError):
    """Wraps a stage failure with the stage name for error routing."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
