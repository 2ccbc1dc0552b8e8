"""Exception hierarchy for the solver stack."""


class FastSlsError(Exception):
    """Base class for all solver errors."""


class DimensionMismatch(FastSlsError, ValueError):
    def __init__(self, location: str, detail: str = ""):
        self.location = location
        msg = f"dimension mismatch at {location}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class NotPositiveDefinite(FastSlsError, ValueError):
    def __init__(self, which: str):
        self.which = which
        super().__init__(f"matrix {which} is not symmetric positive definite")


class RankDeficientE(FastSlsError, ValueError):
    def __init__(self, stage: int):
        self.stage = stage
        super().__init__(f"disturbance matrix E[{stage}] does not have full column rank")


class InvalidParameter(FastSlsError, ValueError):
    pass


class NegativeDual(FastSlsError, ValueError):
    pass


class SingularInnerMatrix(FastSlsError, ArithmeticError):
    pass


class SingularKkt(FastSlsError, ArithmeticError):
    pass


class InsufficientHistory(FastSlsError, ValueError):
    pass


class Infeasible(FastSlsError):
    """The (tightened) nominal problem admits no trajectory.

    ``iteration`` is the fast-SLS iteration index (1-based) when raised from
    the outer loop, ``None`` for a bare QP solve.
    """

    def __init__(self, msg: str = "nominal problem is infeasible", iteration=None):
        self.iteration = iteration
        if iteration is not None:
            msg = f"{msg} (iteration {iteration})"
        super().__init__(msg)


class MaxIterations(FastSlsError):
    pass


class DegenerateAlpha(FastSlsError, ValueError):
    pass


class InnerInfeasible(FastSlsError):
    def __init__(self, outer_iteration: int):
        self.outer_iteration = outer_iteration
        super().__init__(f"inner fast-SLS problem infeasible at outer iteration {outer_iteration}")


class MaxOuterIterations(FastSlsError):
    pass


class SamplingExhausted(FastSlsError):
    pass
