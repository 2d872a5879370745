"""Exception types for the partialupdates package.

Each type subclasses the built-in exception that callers would catch anyway,
so ``except ValueError`` keeps working for configuration and contract errors.
"""


class ConfigurationError(ValueError):
    """A dimension, divisibility or option rule was violated."""


class ContractError(ValueError):
    """Gradients, optimizer states, deltas or index sets do not line up."""


class NumericalOverflowError(FloatingPointError):
    """A forward activation became non-finite."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence threshold."""


class CheckpointError(ValueError):
    """A checkpoint or corpus file is corrupt, truncated or of unknown version."""
