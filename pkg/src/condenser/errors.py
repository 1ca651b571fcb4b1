"""Exception types shared across the toolkit."""


class CondenserError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigurationError(CondenserError):
    """Invalid configuration value, backbone spec, or cross-stage mismatch."""


class StructureError(CondenserError):
    """Two artifacts disagree in layer count or tensor shape."""


class DataError(CondenserError):
    """Dataset ingestion failed (missing class folders, unreadable files)."""


class IntegrityError(CondenserError):
    """A stored artifact is corrupt or inconsistent with its manifest."""


class CheckpointLoadError(IntegrityError):
    """Checkpoint file is truncated, tampered with, or version-mismatched."""


class DivergenceError(CondenserError):
    """Optimization produced a non-finite loss.

    ``diagnostics`` holds the last finite loss values plus the step at
    which the blow-up happened, so a run can be post-mortemed without
    re-executing it.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
