"""Exception taxonomy shared by all geodex modules."""


class GeodexError(Exception):
    """Base class for every error raised by this package."""


class ZeroNorm(GeodexError):
    """Vector too close to zero to normalize."""


class NotARotation(GeodexError):
    """Matrix fails the orthogonality / determinant checks."""


class Degenerate(GeodexError):
    """6-vector cannot be orthogonalized into a rotation."""


class ParseError(GeodexError):
    """Mesh file is malformed; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyMesh(GeodexError):
    """Mesh has no valid (non-degenerate) faces."""


class DegenerateExtent(GeodexError):
    """An AABB extent is too small to normalize against."""


class NonPositiveVolume(GeodexError):
    """Mesh does not enclose positive signed volume."""


class BadSpec(GeodexError):
    """Procedural object specification is invalid."""


class ShapeMismatch(GeodexError):
    """Array shape does not match the layer or cloud contract."""


class BadLabel(GeodexError):
    """Class label out of range."""


class LengthMismatch(GeodexError):
    """Flat parameter arrays differ in length."""


class FrozenModel(GeodexError):
    """Attempted to train a frozen encoder."""


class NotFrozen(GeodexError):
    """Feature service requires a frozen encoder."""


class UnknownObject(GeodexError):
    """Object name not present in the registry."""


class EpisodeOver(GeodexError):
    """env_step called past the episode horizon."""


class NonFiniteAction(GeodexError):
    """Action contains NaN or Inf."""


class MalformedEpisode(GeodexError):
    """Episode violates the single-object / contiguous-step contract."""


class EmptyBuffer(GeodexError):
    """Sampling from a replay buffer with no stored transitions."""


class ModeMismatch(GeodexError):
    """Feature presence inconsistent with the policy mode."""


class EmptyBatch(GeodexError):
    """Update called with an empty transition batch."""


class TooFewObjects(GeodexError):
    """Splitting needs at least four objects."""


class ConfigError(GeodexError):
    """Run configuration failed validation."""


class CheckpointError(GeodexError):
    """Checkpoint bytes are malformed or of the wrong component."""
