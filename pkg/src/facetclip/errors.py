"""Exception types shared across the package."""


class FacetClipError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FacetClipError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(FacetClipError):
    """An operation was called in a way its contract forbids."""


class NumericError(FacetClipError):
    """A numeric precondition failed (NaN input, zero-norm vector, diverged loss)."""


class ConfigError(FacetClipError):
    """A configuration value is invalid or inconsistent."""


class CapacityError(FacetClipError):
    """A token sequence does not fit the model's maximum length."""


class FormatError(FacetClipError):
    """A binary or text file does not match its expected layout."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class ChecksumError(FormatError):
    """File payload does not match its recorded checksum."""


class NotFoundError(FacetClipError):
    """A requested record (sample id, tensor name) is absent."""
