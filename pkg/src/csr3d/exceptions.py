"""Exception taxonomy.

The CLI maps these onto exit codes: validation / parse problems exit 1,
numerical degeneracies exit 2, file / format problems exit 3.
"""


class CSR3DError(Exception):
    """Base class for all package errors."""


class ValidationError(CSR3DError, ValueError):
    """Structurally invalid input: bad dimensions, non-finite values,
    broken invariants, inconsistent metadata."""


class InitializationError(ValidationError):
    """Training set cannot seed the cascade (e.g. no frontal-neutral samples)."""


class LandmarkParseError(ValidationError):
    """Malformed landmark CSV; message carries the line number."""


class DegenerateGeometryError(CSR3DError, ArithmeticError):
    """Geometric input admits no well-posed answer (zero denominator,
    rank-deficient point set, undefined normal)."""


class RankDeficiencyError(DegenerateGeometryError):
    """Stage regression is singular; message names the dead landmark dimensions."""


class GenerationError(CSR3DError, ArithmeticError):
    """Synthetic shape model construction failed (basis rank collapse)."""


class FileFormatError(CSR3DError):
    """Persisted artifact cannot be decoded."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic string."""


class VersionError(FileFormatError):
    """File declares an unsupported format version."""


class ChecksumError(FileFormatError):
    """Payload checksum does not validate."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared payload does."""
