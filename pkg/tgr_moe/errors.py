"""
Exception hierarchy for the TGR-MoE lab.
Each error carries the short code printed by the CLI as `ERROR <code>: <message>`.
"""


class TGRError(Exception):
    """Base class for all domain errors."""
    code = "error"


class ConfigError(TGRError):
    """Invalid or inconsistent configuration."""
    code = "config"


class UsageError(TGRError):
    """Bad command-line usage."""
    code = "usage"


class ShapeError(TGRError):
    """Primitive inputs with incompatible shapes."""
    code = "shape"


class NonFiniteError(TGRError):
    """NaN or Inf produced by a forward evaluation or a loss."""
    code = "divergence"


class GradientCheckError(TGRError):
    """Finite-difference check could not be carried out."""
    code = "gradcheck"


class CheckpointError(TGRError):
    """Missing, truncated or mismatched checkpoint."""
    code = "checkpoint"


class DatasetError(TGRError):
    """Dataset generation or shard parsing failure."""
    code = "dataset"


class IdxFormatError(DatasetError):
    """Malformed IDX image/label file."""
    code = "idx"


class TraceFormatError(TGRError):
    """Malformed routing trace file."""
    code = "trace"


class TeacherError(TGRError):
    """Teacher bundle misuse (missing layer, unfrozen backbone, ...)."""
    code = "teacher"
