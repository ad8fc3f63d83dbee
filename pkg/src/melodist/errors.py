"""Exception hierarchy shared across the package.

Every error raised intentionally by the library derives from MelodistError,
so callers (and the CLI) can distinguish our failures from genuine bugs.
"""

from __future__ import annotations


class MelodistError(Exception):
    """Base class for all library errors."""


# --- data / encoding errors -------------------------------------------------

class TokenParseError(MelodistError):
    """A token string does not match the note/HOLD/REST grammar."""


class OutOfVocabulary(MelodistError):
    """A token is not present in the vocabulary in use."""


class OutOfRange(MelodistError):
    """A transposed pitch leaves the corpus voice range."""


class NoSoundedNote(MelodistError):
    """A sequence contains no note attack, so no absolute label exists."""


class CorpusError(MelodistError):
    """A corpus violates a structural invariant (lengths, emptiness, ...)."""


# --- rank distance errors ---------------------------------------------------

class NonFinite(MelodistError):
    """A feature vector contains NaN or infinite entries."""


class LengthMismatch(MelodistError):
    """Two vectors or sequences that must share a length do not."""


class BadOrder(MelodistError):
    """A truncation order l lies outside [1, N]."""


class TooShort(MelodistError):
    """Kendall tau needs at least two coordinates."""


# --- model errors -----------------------------------------------------------

class ShapeMismatch(MelodistError):
    """An input does not match the model architecture."""


class MissingTransposition(MelodistError):
    """A transposition label was required (or forbidden) by the model mode."""


class ContractViolation(MelodistError):
    """A batch item is internally inconsistent (e.g. stale transposition)."""


class CheckpointError(MelodistError):
    """A checkpoint file is corrupt, truncated, or of the wrong version."""


class TrainingDiverged(MelodistError):
    """The training loss became non-finite."""


# --- evaluation / CLI errors ------------------------------------------------

class CorpusTooSmall(MelodistError):
    """The corpus cannot support the requested sampling scheme."""


class ConfigError(MelodistError):
    """A run configuration is missing, malformed, or contradictory."""
