"""Exception hierarchy shared across the toolkit."""


class FsedError(Exception):
    """Base class for all toolkit errors."""


class EmptyAudioError(FsedError):
    """Audio clip contains no samples."""


class TooShortError(FsedError):
    """Input is shorter than the analysis window it must fill."""


class InvalidBandError(FsedError):
    """Filterbank band edges are outside the representable range."""


class ShapeMismatchError(FsedError):
    """Array shapes are inconsistent with each other or with the config."""


class SilentSourceError(FsedError):
    """A source clip has zero RMS and cannot be level-scaled."""


class UnknownClassError(FsedError):
    """Requested event class is not present in the source bank."""


class InsufficientClassesError(FsedError):
    """Too few event classes for the requested pair category."""


class InvalidConfigError(FsedError):
    """Configuration violates a documented invariant."""


class CacheMismatchError(FsedError):
    """Backward pass received a cache from a different forward/params."""


class NonFiniteGradientError(FsedError):
    """A gradient contained NaN or infinity; training cannot continue."""


class CorruptCheckpointError(FsedError):
    """Checkpoint file is truncated, has a bad magic, or a bad version."""


class InvalidDistanceError(FsedError):
    """Distance passed to a loss must be non-negative."""


class EmptyBatchError(FsedError):
    """Batch or pair list is empty."""


class EmptySupportError(FsedError):
    """Support set contains no examples."""


class EmptyDevSetError(FsedError):
    """Threshold tuning received no development clips."""


class LeakageError(FsedError):
    """Held-out classes overlap with training classes."""


class InvalidCollarError(FsedError):
    """Event-matching collar must be non-negative."""


class ManifestError(FsedError):
    """A dataset/support manifest is missing or malformed."""
