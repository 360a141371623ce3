"""Exception types shared across the package."""


class HybridLabError(Exception):
    """Base class for all package errors."""


class ScaleMismatch(HybridLabError):
    pass


class LevelMismatch(HybridLabError):
    pass


class LengthMismatch(HybridLabError):
    pass


class LevelExhausted(HybridLabError):
    pass


class DomainMismatch(HybridLabError):
    """Operands belong to different ledgers or key domains."""


class DimensionMismatch(HybridLabError):
    pass


class MalformedGraph(HybridLabError):
    pass


class PlanShapeMismatch(HybridLabError):
    pass


class OddSequenceLength(HybridLabError):
    pass


class NotPowerOfTwo(HybridLabError):
    pass


class Overflow(HybridLabError):
    pass


class InvalidBit(HybridLabError):
    pass


class MissingCandidates(HybridLabError):
    pass


class ConfigViolation(HybridLabError):
    pass


class ShapeMismatch(HybridLabError):
    pass


class MissingRun(HybridLabError):
    pass
