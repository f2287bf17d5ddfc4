"""Shared exception types; the CLI maps these onto exit codes."""


class ValidationError(ValueError):
    """Malformed input data: bad schema, broken invariants, invalid config."""


class RleError(ValidationError):
    """Run-length encoding violates its invariants."""


class DatasetError(ValidationError):
    """Dataset file fails schema or referential-integrity checks."""


class ConfigError(ValidationError):
    """Infeasible or inconsistent configuration."""


class PredictionError(ValidationError):
    """Prediction stream does not line up with the dataset split."""


class ProtocolError(RuntimeError):
    """Decoder output and parsed response are out of sync."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""
