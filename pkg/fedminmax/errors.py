"""Exception types surfaced by the command line.

The numerical core raises plain ``ValueError`` for argument and shape
violations; the types below mark failures the CLI maps to exit codes
(1 for validation problems, 2 for runtime / numeric failures).
"""


class ConfigError(ValueError):
    """An experiment config failed to load or validate."""


class SchemaError(ValueError):
    """A tabular input does not match its declared column schema."""


class PartitionError(ValueError):
    """A partition plan cannot be realised on the given dataset."""


class NumericalError(RuntimeError):
    """A risk, gradient or parameter became NaN or infinite during training."""


class ReportError(RuntimeError):
    """Writing a report or snapshot failed."""
