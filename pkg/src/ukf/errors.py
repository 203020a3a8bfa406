"""Exception hierarchy shared by every stage of the generator."""


class UkfError(Exception):
    pass


class IRError(UkfError):
    """Malformed IR detected at construction or parse time."""


class ParseError(UkfError):
    def __init__(self, msg, line=None, col=None):
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(f"{msg}{where}")
        self.line = line
        self.col = col


# cursors
class CursorError(UkfError):
    pass


class NoMatch(CursorError):
    pass


class AmbiguousMatch(CursorError):
    pass


# interpreter
class InterpError(UkfError):
    pass


class MissingBinding(InterpError):
    pass


class UnknownInstr(InterpError):
    pass


class InterpreterBoundsFault(InterpError):
    pass


class SignatureMismatch(InterpError):
    pass


# scheduling
class SchedulingError(UkfError):
    pass


class UnknownParam(SchedulingError):
    pass


class NonPositiveValue(SchedulingError):
    pass


class NonConstantBound(SchedulingError):
    pass


class NonDivisible(SchedulingError):
    pass


class NotPerfectlyNested(SchedulingError):
    pass


class DependenceViolation(SchedulingError):
    pass


class NonContiguousWindow(SchedulingError):
    pass


class WindowEscapes(SchedulingError):
    pass


class IndexOutOfRange(SchedulingError):
    pass


class NotAnAlloc(SchedulingError):
    pass


class DimsDependOnLoop(SchedulingError):
    pass


class TooManyLevels(SchedulingError):
    pass


class PatternMismatch(SchedulingError):
    pass


class MemSpaceMismatch(PatternMismatch):
    """The structure matched but an operand lives in the wrong memory space."""


class PrecisionMismatch(PatternMismatch):
    """The structure matched but an operand has the wrong precision."""


class LaneRuleViolation(SchedulingError):
    pass


class InstrTypeMismatch(SchedulingError):
    pass


# targets
class ValidationError(UkfError):
    pass


# codegen
class CodegenError(UkfError):
    pass


class UnresolvedInstr(CodegenError):
    pass


class NonConstRegisterDim(CodegenError):
    pass


# driver
class DriverError(UkfError):
    pass


class DimensionMismatch(DriverError):
    pass


class MissingKernelForTile(DriverError):
    pass


class ShapeMismatch(DriverError):
    pass


class DegenerateCacheWarning(UserWarning):
    pass
