"""Exception types shared across the engine."""


class ShapeError(ValueError):
    """Tensor dimensions are inconsistent; message names the offending axis."""


class ConfigError(ValueError):
    """Invalid layer/network configuration (groups, widths, variants)."""


class FormatError(ValueError):
    """Malformed input file; message carries the byte offset where parsing failed."""


class IntegrityError(RuntimeError):
    """Checksum or padding-bit violation in a packed artifact."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
