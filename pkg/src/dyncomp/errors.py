"""Exception hierarchy shared by all backends."""


class DyncompError(Exception):
    """Base class for every error raised by this package."""


class LoopSyntaxError(DyncompError):
    def __init__(self, message, line=None, col=None):
        loc = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line
        self.col = col


class ArityMismatch(DyncompError):
    pass


class AmbiguousGate(DyncompError):
    """A threshold gate was evaluated inside its undefined region."""

    def __init__(self, value, gate_index=None):
        where = f" at gate {gate_index}" if gate_index is not None else ""
        super().__init__(f"gate argument {value} is in the undefined region{where}")
        self.value = value
        self.gate_index = gate_index


class CapExceeded(DyncompError):
    pass


class UnsupportedForm(DyncompError):
    """Normal form outside the translation-gated subclass."""


class Unreadable(DyncompError):
    """A value is in no readable basin of the dyadic code."""


class DomainEscape(DyncompError):
    pass


class InadmissibleParameters(DyncompError):
    pass


class BasinViolation(DyncompError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class GadgetBudgetUnsatisfiable(DyncompError):
    pass


class ContractViolated(DyncompError):
    def __init__(self, message, cycle=None):
        super().__init__(message)
        self.cycle = cycle


class WindowInconsistent(DyncompError):
    pass


class StepUnstable(DyncompError):
    pass


class NotReached(DyncompError):
    pass


class NotFound(DyncompError):
    """A witness grid search came up empty (a grid defect, never a refutation)."""


class NotLatticePreserving(DyncompError):
    pass


class DecodeDiverged(DyncompError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TubeViolated(DyncompError):
    pass


class BoundViolated(DyncompError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class Mismatch(DyncompError):
    def __init__(self, message, bundle=None):
        super().__init__(message)
        self.bundle = bundle
