"""Exception types shared across the engine.

The CLI maps these onto process exit codes (config 2, data 3, numerical 4),
so raising the right class matters at module boundaries.
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EngineError):
    """Shapes or dimensions of inputs do not match."""


class DegenerateInputError(EngineError):
    """Input is too small or empty to operate on."""


class ContractError(EngineError):
    """A documented precondition or invariant was violated."""


class NumericalError(EngineError):
    """Non-finite values, divergence, or a non-convergent iteration."""


class ConfigError(EngineError):
    """Invalid configuration."""


class DataError(EngineError):
    """Malformed or missing data files."""


class NotInitializedError(EngineError):
    """Stateful object used before it received any data."""
