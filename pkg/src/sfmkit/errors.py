"""Exception hierarchy shared by all sfmkit modules."""


class SfmError(Exception):
    """Base class for all sfmkit errors."""


# --- geometry ---------------------------------------------------------------

class NonPositiveDepth(SfmError):
    """Point does not project: depth in the camera frame is <= 0."""


class OutOfModelDomain(SfmError):
    """Point/pixel falls outside the validity domain of the camera model."""


class UndistortDiverged(SfmError):
    """Iterative undistortion failed to converge."""


class DegenerateZeroBaseline(SfmError):
    """Essential matrix undefined: relative translation is (numerically) zero."""


class CheiralityAmbiguous(SfmError):
    """Essential decomposition: top two cheirality votes tie."""


class DegenerateLine(SfmError):
    """Line has zero direction component (l1 = l2 = 0)."""


# --- features ---------------------------------------------------------------

class DimensionMismatch(SfmError):
    """Descriptor dimensions of the two feature sets differ."""


class InsufficientMatches(SfmError):
    """Too few matches for the requested estimation."""

    def __init__(self, msg, stage=None):
        super().__init__(msg)
        self.stage = stage


class NoConsensus(SfmError):
    """RANSAC found no model with enough inliers."""


# --- retrieval --------------------------------------------------------------

class DuplicateFrame(SfmError):
    """Frame id already present in the keyframe database."""


class EmptyFeatureSet(SfmError):
    """Operation requires at least one feature."""


# --- relative pose ----------------------------------------------------------

class DegenerateMotion(SfmError):
    """Two-view geometry is degenerate (pure rotation / no parallax)."""


class IllConditioned(SfmError):
    """Linear system too ill-conditioned to solve reliably."""


class NegativeScale(SfmError):
    """Recovered translation scale is not positive."""


# --- solver -----------------------------------------------------------------

class SolverDiverged(SfmError):
    """Nonlinear solve aborted (damping overflow / non-finite cost)."""


class SingularSystem(SfmError):
    """Normal equations could not be factored even at maximum damping."""


# --- pose graph -------------------------------------------------------------

class NoFixedNode(SfmError):
    """Pose graph has no fixed node; gauge is unconstrained."""


class MissingCalibration(SfmError):
    """Multi-camera input requires a rig calibration."""


# --- mapping ----------------------------------------------------------------

class InsufficientParallax(SfmError):
    """Triangulation angle below the configured minimum."""


class CheiralityViolation(SfmError):
    """Triangulated point is behind one of the observing cameras."""


class ParallelRays(SfmError):
    """Midpoint triangulation: rays are (numerically) parallel."""


class NoGauge(SfmError):
    """Bundle adjustment has neither a fixed pose nor absolute priors."""


# --- io ---------------------------------------------------------------------

class ParseError(SfmError):
    """Malformed input file."""

    def __init__(self, msg, line=None, field=None):
        parts = [msg]
        if line is not None:
            parts.append(f"line {line}")
        if field is not None:
            parts.append(f"field {field!r}")
        super().__init__(": ".join(parts))
        self.line = line
        self.field = field


class InvariantViolation(SfmError):
    """Parsed value violates a documented invariant."""


class BadMagic(SfmError):
    """File does not start with the expected magic bytes."""


class ChecksumMismatch(SfmError):
    """Stored checksum does not match file contents."""


class VersionUnsupported(SfmError):
    """File format version is newer than this reader supports."""


class UnsupportedCameraKind(SfmError):
    """Camera model has no equivalent in the target format."""


# --- evaluation -------------------------------------------------------------

class NoOverlap(SfmError):
    """Trajectories share no associable timestamps."""
