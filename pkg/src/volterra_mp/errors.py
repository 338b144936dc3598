"""Exception types shared across the solvers."""


class NumericalBlowup(FloatingPointError):
    """A solver produced a non-finite value."""

    def __init__(self, what: str, path: int, step: int):
        super().__init__(f"{what}: non-finite value on path {path} at step {step}")
        self.path = path
        self.step = step


class NoConvergence(RuntimeError):
    """A fixed-point iteration hit its iteration cap."""

    def __init__(self, what: str, iterations: int, last_ratio: float, last_delta: float):
        super().__init__(
            f"{what}: no convergence after {iterations} iterations "
            f"(last delta {last_delta:.3e}, last ratio {last_ratio:.3f})"
        )
        self.iterations = iterations
        self.last_ratio = last_ratio
        self.last_delta = last_delta


class IllConditioned(ArithmeticError):
    """Regression design matrix could not be rescued by the ridge term."""


class InternalConsistency(AssertionError):
    """A structural invariant (for example a symmetry) was violated."""
