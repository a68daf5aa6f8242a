"""Exception types shared across the package."""


class MechDisError(Exception):
    """Base class for all package errors."""


class DimensionError(MechDisError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(MechDisError, ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class ContractError(MechDisError, ValueError):
    """A documented precondition of an operation was violated."""


class DatasetFormatError(MechDisError, ValueError):
    """A dataset or checkpoint on disk is malformed."""


class MetricError(MechDisError, ValueError):
    """A metric cannot be computed on the given inputs."""


class PreconditionError(ContractError):
    """A lemma or criterion precondition does not hold for the given pattern."""
