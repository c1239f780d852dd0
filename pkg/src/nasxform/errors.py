"""Exception hierarchy shared by every module of the package."""


class NasXformError(Exception):
    """Base class for all package errors."""


class InvalidSpec(NasXformError):
    pass


class Unbounded(NasXformError):
    pass


class CapExceeded(NasXformError):
    pass


# Transformation errors. Each carries enough context to point at the failing
# step when raised from inside a sequence.

class TransformError(NasXformError):
    pass


class UnknownIterator(TransformError):
    pass


class NotPermutable(TransformError):
    pass


class NonDivisible(TransformError):
    pass


class NotAdjacent(TransformError):
    pass


class BadPartition(TransformError):
    pass


class KernelAxis(TransformError):
    pass


class ChannelMismatch(TransformError):
    pass


class NotDense(TransformError):
    """A neural rewrite would leave holes in a written tensor."""


class SharedTensorConflict(TransformError):
    """A per-part rewrite would reshape a tensor other parts still use."""


class Unrepresentable(NasXformError):
    """The nest no longer corresponds to any ConvSpec."""


class SequenceError(TransformError):
    def __init__(self, step_index: int, step: str, cause: Exception):
        self.step_index = step_index
        self.step = step
        self.cause = cause
        super().__init__(f"step {step_index} `{step}`: {type(cause).__name__}: {cause}")


class ParseError(NasXformError):
    pass


# Interpreter errors.

class UnboundTensor(NasXformError):
    pass


class RankMismatch(NasXformError):
    pass


class IndexOutOfRange(NasXformError):
    pass


class ShapeMismatch(NasXformError):
    pass


# Search / config errors.

class Exhausted(NasXformError):
    pass


class ConfigError(NasXformError):
    pass
