"""Exception hierarchy shared by every stage of the pipeline."""


class DiffMixError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class ValidationError(DiffMixError):
    """Input data or configuration failed validation (exit code 2)."""


class StageError(DiffMixError):
    """A pipeline stage failed at run time (exit code 3)."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ShapeMismatch(ValidationError, ValueError):
    pass


class InvariantViolation(ValidationError):
    pass


class VocabularyMismatch(ValidationError):
    pass


class InvalidSchedule(ValidationError):
    pass


class StepOutOfRange(ValidationError, IndexError):
    pass


class StepOrderViolation(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class InvalidGeometry(ValidationError):
    pass


class ManifestMissing(ValidationError, FileNotFoundError):
    pass


class TileCorrupt(ValidationError):
    def __init__(self, tile_id, reason):
        super().__init__(f"tile {tile_id!r}: {reason}")
        self.tile_id = tile_id
        self.reason = reason


class DonorExhausted(DiffMixError):
    """No donor nucleus satisfies the size tolerance; widen it or skip the tile."""


class DataShapeMismatch(ValidationError):
    pass


class ResumeStateCorrupt(DiffMixError):
    pass


class IncompatibleCheckpoint(ValidationError):
    pass


class NotInitialized(DiffMixError):
    pass
