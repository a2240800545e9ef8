"""Exception types shared across the package."""


class SuperGSegError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(SuperGSegError):
    """Incompatible dimensions, thresholds, or settings."""


class DomainError(SuperGSegError):
    """A value outside the mathematical domain of an operation."""


class ParseError(SuperGSegError):
    """A malformed or truncated file; the message names the offending offset."""


class IngestError(SuperGSegError):
    """Inconsistent external input data, e.g. mask bitmaps of mixed sizes."""


class ContractError(SuperGSegError):
    """An API precondition was violated by the caller."""


class GenerationError(SuperGSegError):
    """A synthetic-scene request that cannot be satisfied."""


class DivergenceError(SuperGSegError):
    """Training aborted because the loss blew up."""
