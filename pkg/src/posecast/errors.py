"""Exception taxonomy shared across the package.

Every error raised on purpose derives from PosecastError so callers (and the
CLI) can map failures to exit codes without matching on builtins.
"""


class PosecastError(Exception):
    """Base class for all errors raised by posecast."""


class ShapeError(PosecastError):
    """Tensor or layer dimension mismatch. Message carries both shapes."""


class ContractError(PosecastError):
    """A documented precondition was violated (empty batch, non-scalar loss, ...)."""


class VocabularyError(PosecastError):
    """Label index outside its vocabulary, or unknown label name."""


class ProjectionError(PosecastError):
    """A joint ended up at or behind the camera plane during exact projection."""

    def __init__(self, message, joint_index=None, joint_name=None):
        super().__init__(message)
        self.joint_index = joint_index
        self.joint_name = joint_name


class LossUndefinedError(PosecastError):
    """Loss cannot be computed, e.g. every joint of a sample is masked out."""


class TrainingError(PosecastError):
    """Non-finite gradient or similar numerical failure inside an update."""


class TrainingAbort(PosecastError):
    """Training stopped on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class DataValidationError(PosecastError):
    """Dataset file failed a structural or semantic check."""


class VersionError(PosecastError):
    """Artifacts disagree on format version or layout."""
