"""Exception hierarchy shared by every stage of the inference chain."""


class SelfiSBIError(Exception):
    """Base class for all package errors."""


class DimensionError(SelfiSBIError, ValueError):
    pass


class SolverDivergenceError(SelfiSBIError, FloatingPointError):
    """Raised when the Euler recurrence produces a non-finite population."""

    def __init__(self, step, omega=None, context=None):
        self.step = step
        self.omega = omega
        self.context = context
        msg = f"Lotka-Volterra solver diverged at step {step}"
        if omega is not None:
            msg += f" for omega={tuple(float(w) for w in omega)}"
        if context:
            msg += f" ({context})"
        super().__init__(msg)


class InsufficientDataError(SelfiSBIError, ValueError):
    pass


class SingularMatrixError(SelfiSBIError, ArithmeticError):
    """A matrix required to be positive definite is not.

    ``min_eigenvalue`` carries the smallest eigenvalue found, for diagnostics.
    """

    def __init__(self, what, min_eigenvalue):
        self.what = what
        self.min_eigenvalue = float(min_eigenvalue)
        super().__init__(
            f"{what} is not positive definite (smallest eigenvalue {self.min_eigenvalue:.3e})"
        )


class IncompatibleDataError(SelfiSBIError, ValueError):
    """A data vector was produced with a different mask than the artifacts."""


class EnsembleFailure(SelfiSBIError, RuntimeError):
    def __init__(self, failures):
        self.failures = list(failures)
        shown = ", ".join(f"{g}/{i}: {e}" for g, i, e in self.failures[:5])
        super().__init__(f"{len(self.failures)} simulation(s) failed ({shown})")


class BudgetExhausted(SelfiSBIError, RuntimeError):
    """Rejection sampling ran out of draws; ``partial`` holds what was collected."""

    def __init__(self, partial, target):
        self.partial = partial
        self.target = target
        super().__init__(
            f"only {partial.n_accepted} of {target} samples accepted "
            f"after {partial.n_draws} draws"
        )


class ConfigError(SelfiSBIError, ValueError):
    pass


class ArtifactError(SelfiSBIError, RuntimeError):
    """Missing artifact or checksum mismatch on load."""
