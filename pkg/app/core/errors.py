"""
Error Types
===========
Exception hierarchy shared by the services, the CLI and the HTTP layer.
"""


class LocalizerError(Exception):
    """Base class for every failure raised by this package."""


class MapFormatError(LocalizerError, ValueError):
    """A map file record could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class InvalidMapError(LocalizerError, ValueError):
    """A map violates one of its structural invariants."""


class DanglingReferenceError(InvalidMapError):
    """A record references an id that does not exist."""

    def __init__(self, ref_kind: str, ref_id, context: str = ""):
        self.ref_kind = ref_kind
        self.ref_id = ref_id
        where = f" ({context})" if context else ""
        super().__init__(f"dangling reference to {ref_kind} {ref_id!r}{where}")


class DescriptorLengthError(LocalizerError, ValueError):
    """Descriptor bit lengths do not agree."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class TooFewDescriptorsError(LocalizerError, ValueError):
    """Not enough distinct descriptors to seed the requested vocabulary."""


class InvalidBoundsError(LocalizerError, ValueError):
    """Region generation bounds are empty, reversed or non-finite."""


class InvalidConfigError(LocalizerError, ValueError):
    """A configuration passes field validation but describes an impossible setup."""


class ModelFormatError(LocalizerError, ValueError):
    """A model, vocabulary or region-bank file is malformed."""


class DegenerateSampleError(LocalizerError):
    """A minimal pose sample has no well-defined solution."""


class TooFewCorrespondencesError(LocalizerError, ValueError):
    """Pose estimation needs at least three correspondences."""


class UndefinedMetricError(LocalizerError, ValueError):
    """A metric was requested over an empty record set."""


class ExperimentStageError(LocalizerError):
    """An experiment stage failed; names the stage and the cause."""

    def __init__(self, stage: str, cause: str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class DegenerateGravityWarning(UserWarning):
    """Gravity is (nearly) parallel to the optical axis; rotation falls back to 0."""
