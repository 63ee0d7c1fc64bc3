"""Exception hierarchy shared across the package."""


class BlankLMError(Exception):
    """Base class for all package errors."""


class ShapeError(BlankLMError):
    """Tensor or parameter dimensions do not line up."""


class NumericError(BlankLMError):
    """A computation produced NaN/Inf, or was fed non-finite values."""


class ContractError(BlankLMError):
    """An operation was called outside its documented preconditions."""


class DegenerateInputError(BlankLMError):
    """Input is structurally valid but too small/empty to do the job."""


class LengthError(ContractError):
    """A laid-out sequence exceeds the configured maximum length."""


class CheckpointError(BlankLMError):
    """Base class for checkpoint load failures."""


class CheckpointHeaderError(CheckpointError):
    """Checkpoint header is missing, malformed, or has a bad format tag."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ends in the middle of a record."""


class CheckpointShapeError(CheckpointError):
    """Checkpoint tensors do not match the shapes implied by the config."""
