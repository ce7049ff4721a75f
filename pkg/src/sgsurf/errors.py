"""Exception hierarchy shared across the package."""


class SGSurfError(Exception):
    """Base class for all package errors."""


class InputError(SGSurfError, ValueError):
    """Caller passed an invalid value (out-of-bounds pixel, shape mismatch, ...)."""


class ConfigurationError(SGSurfError):
    """A configuration cannot be used (unknown key, no valid confidence distribution, ...)."""


class AlignmentError(SGSurfError):
    """Similarity alignment is under-determined or degenerate."""


class BundleError(SGSurfError):
    """Base class for dataset bundle I/O failures."""


class SchemaVersionError(BundleError):
    pass


class MissingFileError(BundleError):
    pass


class MalformedFileError(BundleError):
    """JSON or other payload that cannot be parsed; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(SGSurfError):
    pass
