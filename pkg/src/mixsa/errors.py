"""Exception types shared across the toolkit."""


class MixsaError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatchError(MixsaError):
    """Image or tensor dimensions violate an operation's contract."""


class NonFiniteLatentError(MixsaError):
    """A latent contains NaN or infinite values."""


class GenerationError(MixsaError):
    """A denoising forward pass failed; carries site/timestep context."""


class DuplicateKeyError(MixsaError):
    """An attention-bank key or registry name was recorded twice."""


class MissingKeyError(MixsaError):
    """An attention-bank key or registry name is absent."""


class CacheFormatError(MixsaError):
    """A cache file is truncated, corrupt, or has the wrong magic/version."""


class ScheduleMismatchError(MixsaError):
    """A bank or trajectory was produced under a different noise schedule."""


class StageError(MixsaError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class AdapterError(MixsaError):
    """An external detector/segmenter/extractor adapter failed or is missing."""


class BackendUnavailableError(MixsaError):
    """A requested denoiser backend cannot be constructed in this environment."""
