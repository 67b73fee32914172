"""Exception hierarchy shared across the toolkit.

Every error the library raises deliberately derives from ``RavelitError`` so
callers (and the CLI exit-code mapping) can distinguish our failures from
genuine bugs.
"""


class RavelitError(Exception):
    """Base class for all toolkit errors."""


class UnknownBackendError(RavelitError):
    """Requested model id is neither a registered mock nor a weights alias."""


class ChecksumMismatchError(RavelitError):
    """Stored checksum does not match the bytes on disk."""


class TextTowerUnavailableError(RavelitError):
    """Operation needs a text encoder but the backend is image-only."""


class DegenerateDirectionError(RavelitError):
    """A guidance direction collapsed to (numerically) zero."""


class CorpusError(RavelitError):
    """Dataset directory is empty, unreadable, or breaks the pairing rule."""


class ResidualFileError(RavelitError):
    """Residual file is corrupted, has a bad header, or fails validation."""


class CheckpointError(RavelitError):
    """Checkpoint is unreadable or incompatible with the requested config."""


class MetricBackendError(RavelitError):
    """A perceptual/feature metric was requested without its backend."""
