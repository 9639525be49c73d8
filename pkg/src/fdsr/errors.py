"""Exception hierarchy shared across the package."""


class FdsrError(Exception):
    """Base class for all package errors."""


class DimensionError(FdsrError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(FdsrError, ValueError):
    """An operation or run was configured with inconsistent settings."""


class UsageError(FdsrError, ValueError):
    """An API was called with arguments outside its contract."""


class StateError(FdsrError, RuntimeError):
    """An object was used in a state that does not permit the call."""


class FormatError(FdsrError, ValueError):
    """A file does not conform to its declared on-disk format.

    ``offset`` is the byte offset at which decoding failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteLossError(FdsrError, ArithmeticError):
    """Training produced a NaN or infinite loss.

    Carries a diagnostics payload so the failing step can be reported
    without updating any parameters.
    """

    def __init__(self, iteration: int, loss_total: float, loss_rec: float,
                 loss_feat: float):
        super().__init__(
            f"non-finite loss at iteration {iteration}: "
            f"total={loss_total!r} rec={loss_rec!r} feat={loss_feat!r}")
        self.iteration = iteration
        self.loss_total = loss_total
        self.loss_rec = loss_rec
        self.loss_feat = loss_feat
