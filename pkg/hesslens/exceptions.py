"""Exception hierarchy shared by every hesslens app."""


class HessLensError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(HessLensError, ValueError):
    """Invalid model spec, training config, selection or batch shape."""


class DimensionError(ConfigurationError):
    """Vector, operator or checkpoint dimensions do not agree."""


class DenseLimitError(HessLensError):
    """Refusal to materialize an operator above the dense size guard."""

    def __init__(self, dim, limit):
        self.dim = dim
        self.limit = limit
        super().__init__(f'refusing to materialize dimension {dim} (limit {limit})')


class FormatError(HessLensError, ValueError):
    """Malformed IDX file or checkpoint container."""


class LabelRangeError(FormatError):
    """A label falls outside [0, C)."""


class NumericError(HessLensError, ArithmeticError):
    """Non-finite values met during a numerical routine."""

    def __init__(self, message, *, seed=None, step=None):
        self.seed = seed
        self.step = step
        super().__init__(message)


class DivergenceError(NumericError):
    """Training loss exceeded the divergence threshold."""

    def __init__(self, step, loss, threshold):
        self.loss = loss
        self.threshold = threshold
        super().__init__(f'loss {loss:.6g} exceeded {threshold:.6g} at step {step}', step=step)
