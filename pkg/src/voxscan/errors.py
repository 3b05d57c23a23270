"""Exception taxonomy shared across the package.

Every error raised on purpose derives from VoxscanError so callers (and the
CLI exit-code mapping) can tell deliberate failures from genuine bugs.
"""


class VoxscanError(Exception):
    """Base class for all package errors."""


class ValidationError(VoxscanError):
    """Bad argument, config, manifest, or value outside its documented domain."""


class ShapeError(ValidationError):
    """Array shape or rank does not match the operation's contract."""


class NumericsError(VoxscanError):
    """An op produced (or was handed) non-finite values while checks were on."""


class GraphError(VoxscanError):
    """Autodiff graph misuse: non-scalar loss, cycle, or replay mismatch."""


class NiftiFormatError(VoxscanError):
    """Byte payload is not a well-formed single-file NIfTI-1 volume."""


class CheckpointError(VoxscanError):
    """Checkpoint bytes are malformed, truncated, or version-incompatible."""


class DivergenceError(VoxscanError):
    """Training loss became non-finite."""
