"""Exception types raised across the package."""


class Robust2BSDEError(Exception):
    """Base class for all errors raised by robust2bsde."""


class InvalidMatrixError(Robust2BSDEError, ValueError):
    """A matrix is not symmetric positive semi-definite within tolerance."""


class SimulationDivergedError(Robust2BSDEError, FloatingPointError):
    def __init__(self, path, step):
        self.path = int(path)
        self.step = int(step)
        super().__init__(f"non-finite state on path {self.path} at step {self.step}")


class InvalidParametersError(Robust2BSDEError, ValueError):
    """Model parameters violate a documented precondition."""


class StepDivergenceError(Robust2BSDEError, ArithmeticError):
    """The per-step Picard iteration failed to contract."""

    def __init__(self, step, lipschitz_dt, message=None):
        self.step = int(step)
        self.lipschitz_dt = float(lipschitz_dt)
        if message is None:
            message = (
                f"Picard iteration diverged at step {self.step} "
                f"(Lipschitz*dt = {self.lipschitz_dt:.3g}; contraction needs < 1)"
            )
        super().__init__(message)


class BasisError(Robust2BSDEError, ValueError):
    """The regression design matrix is rank deficient."""


class PreconditionError(Robust2BSDEError, ValueError):
    """Inputs to a verifier do not satisfy its hypotheses."""


class DecompositionViolationError(Robust2BSDEError, AssertionError):
    """A non-decreasing process acquired a negative increment."""


class ConfigurationError(Robust2BSDEError, ValueError):
    """Invalid solver or experiment configuration."""
