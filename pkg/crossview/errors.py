"""
Domain exceptions
=================

Every error subclasses a built-in type so callers can catch broadly.
"""


class ShapeError(ValueError):
    """Operand shapes do not agree"""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced by an op or a gradient"""


class TapeError(RuntimeError):
    """Backward called on a consumed or foreign tape"""


class BatchInfeasibleError(ValueError):
    """No batch of the requested size satisfies the neighbor constraint"""


class FormatError(ValueError):
    """Malformed file (image, checkpoint, attention map, index)"""


class CropBudgetError(ValueError):
    """beta * gamma exceeds the configured token budget"""
