"""Exception types shared across the package."""


class SpeedgenError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpeedgenError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class DomainError(SpeedgenError, ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class ContractError(SpeedgenError, ValueError):
    """A caller violated a documented precondition."""


class DataError(SpeedgenError, ValueError):
    """Malformed or out-of-range input data (carries row/trip context in the message)."""


class GenerationError(SpeedgenError, RuntimeError):
    """Sequential sampling could not continue; carries the partial trajectory."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class UntrainedBinError(GenerationError):
    """A sampler reached a speed bin with no trained model / no observed transitions."""

    def __init__(self, bin_index: int, message: str, partial=None):
        super().__init__(message, partial=partial)
        self.bin_index = bin_index


class DivergenceError(SpeedgenError, RuntimeError):
    """Training produced a non-finite loss; carries the last checkpoint path if any."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
