"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError`, which the
command-line front end maps to exit status 2.
"""


class TdlPartError(Exception):
    pass


class ValidationError(TdlPartError):
    pass


# -- TDL ---------------------------------------------------------------------

class TdlSyntaxError(ValidationError):
    def __init__(self, message, pos=None, line=None, col=None, expected=None):
        self.pos = pos
        self.line = line
        self.col = col
        self.expected = expected
        where = f" at line {line}, column {col}" if line is not None else ""
        super().__init__(f"{message}{where}")


class UndeclaredTensor(ValidationError):
    pass


class RankMismatch(ValidationError):
    pass


class NonAffineIndex(ValidationError):
    pass


class NestedReduce(ValidationError):
    pass


class AssumptionViolation(ValidationError):
    pass


class UnknownIndexVar(ValidationError):
    pass


# -- analysis ----------------------------------------------------------------

class NonAffineError(ValidationError):
    pass


class UnboundSymbol(ValidationError):
    pass


class NoStrategy(ValidationError):
    pass


# -- graphs ------------------------------------------------------------------

class SchemaError(ValidationError):
    pass


class UnknownOperator(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class CycleDetected(ValidationError):
    pass


class NotLinear(ValidationError):
    pass


class CutTooWide(ValidationError):
    pass


# -- planning / materialization ---------------------------------------------

class IncompletePlan(ValidationError):
    pass


class UnconcretizableShape(ValidationError):
    pass


class IndivisibleShape(ValidationError):
    pass


class TooLarge(ValidationError):
    pass


class InconsistentPlan(ValidationError):
    pass


class TopologyMismatch(ValidationError):
    pass
