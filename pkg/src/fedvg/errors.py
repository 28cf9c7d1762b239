"""Exception hierarchy shared by every fedvg module."""


class FedVGError(Exception):
    """Base class for all fedvg errors."""


class InputError(FedVGError, ValueError):
    """An argument is outside the operation's domain."""


class StructuralError(FedVGError, ValueError):
    """Two parameter structures are not congruent, or a shape does not fit a layer."""


class NumericError(FedVGError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class PartitionError(FedVGError):
    """The Dirichlet partitioner could not give every client at least one sample."""


class SamplingError(FedVGError):
    """A class does not hold enough samples for the requested draw."""


class ConfigError(FedVGError):
    """An experiment configuration failed to parse or validate."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
