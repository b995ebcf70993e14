"""
Exception hierarchy shared by every service.

Value-domain problems subclass ValueError and file-format problems subclass
OSError, so callers may catch either the precise type or the builtin one.
"""


class InkError(Exception):
    """Base class for all toolkit errors"""


class ConfigError(InkError, ValueError):
    """Run configuration failed validation"""


class DimensionMismatchError(InkError, ValueError):
    """Vector or matrix dimensions do not agree"""


class NotOnSphereError(InkError, ValueError):
    """An embedding that must be unit-norm is not"""


class DegenerateEmbeddingError(InkError, ValueError):
    """Pre-normalization activation is the zero vector"""


class EmptyInputError(InkError, ValueError):
    """A collection that must be nonempty is empty"""


class CovarianceError(InkError, ValueError):
    """Covariance is not positive definite after regularization"""


class DivergenceError(InkError, ArithmeticError):
    """Training loss became non-finite or exploded"""

    def __init__(self, message: str, epoch: int, loss: float):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss


class FormatError(InkError, OSError):
    """Base class for binary file format problems"""


class MalformedHeaderError(FormatError):
    """Magic bytes, version or header fields are invalid"""


class TruncatedPayloadError(FormatError):
    """File ends before the declared payload"""


class FormatDimensionMismatchError(FormatError):
    """Declared shapes disagree with each other or with the expected layout"""
