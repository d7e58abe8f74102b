"""Error taxonomy shared across the package.

The CLI maps these to distinct exit codes (see cli.EXIT_CODES).
"""


class HlgpError(Exception):
    """Base class for all package errors."""


class ConfigError(HlgpError):
    """Invalid or inconsistent configuration."""


class ContractError(HlgpError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(HlgpError):
    """Invalid dataset content (e.g. overlapping task label spaces)."""


class FormatError(DataError):
    """Malformed serialized file. Subclasses identify the failure kind."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """Unsupported format version."""


class ChecksumError(FormatError):
    """Payload checksum mismatch."""


class TruncationError(FormatError):
    """File ends before the declared payload/fields."""


class NumericError(HlgpError):
    """Non-finite values or other numeric breakdown."""


class GradCheckError(HlgpError):
    """Analytic and finite-difference gradients disagree beyond tolerance."""
