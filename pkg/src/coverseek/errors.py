"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, I/O problems with 3 and data-integrity problems with 4.
"""


class CoverseekError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CoverseekError, ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


class AudioReadError(CoverseekError, OSError):
    """Audio file missing or unreadable (exit code 3)."""


class UnsupportedEncodingError(CoverseekError, ValueError):
    """Audio file readable but not a supported PCM encoding (exit code 3)."""


class FormatError(CoverseekError, ValueError):
    """Corrupt or incompatible binary container: bad magic, version,
    truncation or checksum mismatch (exit code 4)."""


class DataIntegrityError(CoverseekError, ValueError):
    """Logical inconsistency between artifacts, e.g. duplicate ids or an
    index entry whose recording is absent from the store (exit code 4)."""


class TrainingDivergedError(CoverseekError, RuntimeError):
    """Non-finite loss during training; carries a diagnostic snapshot."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
