"""Exception types shared across the package.

Contract violations mean the caller passed something the API forbids.
The runtime errors (degenerate batch, degenerate embedding, numerical
failure) mean the inputs were well formed but the computation cannot
produce a meaningful result.
"""


class OmniAlignError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(OmniAlignError, ValueError):
    """An argument violated a documented precondition."""


class DegenerateBatchError(OmniAlignError):
    """Batch statistics were requested on fewer than two rows."""


class DegenerateEmbeddingError(OmniAlignError):
    """An embedding collapsed to (numerically) zero norm before normalization."""


class NumericalFailureError(OmniAlignError):
    """A numerical routine could not produce a finite, trustworthy result."""


class ConfigError(OmniAlignError):
    """A config file or override is malformed, unknown, or inconsistent."""
