"""Exception hierarchy shared by every oprisk module."""
from __future__ import annotations


class OpriskError(Exception):
    """Base class for all library errors."""


class InvalidMdp(OpriskError, ValueError):
    pass


class InvalidPolicy(OpriskError, ValueError):
    pass


class ZeroBehaviorProbability(OpriskError, ValueError):
    pass


class CoverageViolation(OpriskError, ValueError):
    """Target policy puts mass on an action the behavior policy never takes."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        shown = ", ".join(f"(s={s}, a={a})" for s, a in self.pairs[:10])
        more = "" if len(self.pairs) <= 10 else f" and {len(self.pairs) - 10} more"
        super().__init__(f"behavior policy does not cover target actions: {shown}{more}")


class OutOfRangeLambda(OpriskError, ValueError):
    pass


class DatasetFormatError(OpriskError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ConstructionError(OpriskError, ValueError):
    pass


class NonpositiveNormalizer(OpriskError, ValueError):
    pass


class IncompatibleAtomMode(OpriskError, ValueError):
    pass


class SupportOutsideGrid(OpriskError, ValueError):
    pass


class ModelStateMissing(OpriskError, ValueError):
    pass


class NeedAtLeastTwoTrajectories(OpriskError, ValueError):
    pass


class AllWeightsZero(OpriskError, ValueError):
    pass


class ZeroStepwiseNormalizer(OpriskError, ValueError):
    def __init__(self, h: int):
        self.h = h
        super().__init__(f"sum of cumulative weights at step {h} is zero")


class DatasetTooSmall(OpriskError, ValueError):
    pass


class InvalidDistortion(OpriskError, ValueError):
    pass


class AlphaOutOfRange(OpriskError, ValueError):
    pass


class AtlasTooLarge(OpriskError, RuntimeError):
    pass


class UnsupportedForExactMoments(OpriskError, ValueError):
    pass


class NotUdag(OpriskError, ValueError):
    pass


class UnknownEnvironment(OpriskError, KeyError):
    pass
