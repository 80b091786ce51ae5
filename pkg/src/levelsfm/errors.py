"""Exception types shared across the reconstruction engine."""


class LevelSfmError(Exception):
    """Base class for all errors raised by this package."""


class CheiralityViolation(LevelSfmError):
    """A point was projected with non-positive depth."""


class DegenerateConfiguration(LevelSfmError):
    """Input geometry does not constrain the model (collinear/coincident data,
    no RANSAC consensus, ...)."""


class InsufficientCorrespondences(LevelSfmError):
    """Fewer correspondences than the minimal solver needs."""


class ParallelRays(LevelSfmError):
    """Triangulation rays are (near-)parallel."""


class LengthMismatch(LevelSfmError):
    """Paired sequences have different lengths."""


class EmptySet(LevelSfmError):
    """A point-set metric was asked to run on an empty set."""


class ParseError(LevelSfmError):
    """Malformed input file.  Carries the offending line number when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f" in {path}"
        if line is not None:
            where += f" at line {line}"
        super().__init__(message + where)


class MissingImage(LevelSfmError):
    """A correspondence references an image id that was never declared."""


class NoViablePair(LevelSfmError):
    """The scene graph has no edge suitable for two-view initialization."""


class InitializationDiverged(LevelSfmError):
    """Two-view initialization finished with unusable reprojection error."""


class RegistrationDiverged(LevelSfmError):
    """Frame registration finished with unusable reprojection error."""


class NonFiniteGradient(LevelSfmError):
    """An optimizer step saw NaN/Inf gradients; parameters were left unchanged."""


class NonFiniteLoss(LevelSfmError):
    """A loss evaluated to NaN/Inf; the step was skipped."""


class ProjectionStalled(LevelSfmError):
    """Level-set projection failed to reduce the SDF magnitude."""


class UnknownScene(LevelSfmError):
    """Requested synthetic scene id does not exist."""


class ConfigError(LevelSfmError):
    """Invalid or unknown configuration values."""
