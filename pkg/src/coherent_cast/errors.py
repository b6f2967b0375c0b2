"""Exception hierarchy shared by all modules."""


class CoherentCastError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(CoherentCastError, ValueError):
    pass


# hierarchy
class HierarchyError(CoherentCastError, ValueError):
    pass


class MultipleRoots(HierarchyError):
    pass


class UnknownParent(HierarchyError):
    pass


class CycleDetected(HierarchyError):
    pass


class UnbalancedLeafDepth(HierarchyError):
    pass


class DuplicateNode(HierarchyError):
    pass


class SingularGram(CoherentCastError, ArithmeticError):
    pass


# diffcore / model
class NonFiniteLoss(CoherentCastError, FloatingPointError):
    pass


class EmptyWindow(CoherentCastError, ValueError):
    pass


class MissingLevelParams(CoherentCastError, KeyError):
    pass


class ShapeMismatch(CoherentCastError, ValueError):
    pass


# qp
class QpError(CoherentCastError):
    """Raised by the QP layer; ``solution`` carries the last iterate when available."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class Infeasible(QpError):
    pass


class MaxIterations(QpError):
    pass


class NonConvex(QpError, ValueError):
    pass


class SingularKKT(QpError):
    pass


class TooManyInequalities(QpError, ValueError):
    pass


# reconcile
class SingularW(CoherentCastError, ArithmeticError):
    pass


class InsufficientSamples(CoherentCastError, ValueError):
    pass


class InfeasibleBand(Infeasible):
    pass


# task_opt
class MissingLevelRow(CoherentCastError, KeyError):
    pass


# metrics
class ZeroDenominator(CoherentCastError, ZeroDivisionError):
    pass


class ZeroWeightSum(CoherentCastError, ZeroDivisionError):
    pass


class NoUpperNodes(CoherentCastError, ValueError):
    pass


# data_io
class DataError(CoherentCastError, ValueError):
    pass


class MissingSeries(DataError):
    pass


class GapInSeries(DataError):
    pass


class DuplicateRow(DataError):
    pass


class UnknownSeriesId(DataError):
    pass


class WindowTooLong(DataError):
    pass


# training / cli
class ConfigError(CoherentCastError, ValueError):
    pass
