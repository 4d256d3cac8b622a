"""Exception types shared across the library."""


class XfersvError(Exception):
    """Base class for all library errors."""


class ShapeError(XfersvError, ValueError):
    """Operands have incompatible or empty shapes."""


class ParameterError(XfersvError, ValueError):
    """A scalar or config parameter is out of its valid range."""


class DegenerateInputError(XfersvError, ValueError):
    """Input is structurally valid but degenerate (zero vector, rank-0 data)."""


class DegenerateBatchError(XfersvError, ValueError):
    """Batch cannot support the requested loss (e.g. single distinct label)."""


class LabelError(XfersvError, ValueError):
    """A class label is outside [0, num_classes)."""


class FormatError(XfersvError, ValueError):
    """A serialized file is corrupt, truncated, or has the wrong version."""


class ConfigError(XfersvError, ValueError):
    """An experiment config is inconsistent or contains unknown keys."""


class MissingPrerequisiteError(XfersvError, RuntimeError):
    """A pipeline stage requires an artifact that does not exist yet."""


class IdLookupError(XfersvError, KeyError):
    """A trial references an utterance id with no stored embedding."""


class UsageError(XfersvError, RuntimeError):
    """An API was called out of order (e.g. backward without forward cache)."""


class NumericError(XfersvError, ArithmeticError):
    """A computation produced a non-finite value."""
