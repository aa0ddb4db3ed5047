"""Exception hierarchy shared across the package."""


class RsmpError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(RsmpError):
    """Operands disagree on grid, mode, dimensions, or path counts."""


class DomainError(RsmpError):
    """A numeric argument lies outside its admissible range."""


class ValueOffGrid(RsmpError):
    """A control value is farther than the snap tolerance from every grid point."""


class MissingPaths(RsmpError):
    """A feedback control was paired without the path ensemble needed to resolve cells."""


class NonFiniteCoefficient(RsmpError):
    """A coefficient evaluation produced NaN or Inf."""


class BlowUp(RsmpError):
    """A simulated state exceeded the blow-up guard."""

    def __init__(self, step, max_norm):
        self.step = step
        self.max_norm = max_norm
        super().__init__(f"state norm {max_norm:.3e} exceeded guard at step {step}")


class SingularRegression(RsmpError):
    """Least-squares normal matrix unusable even after the ridge fallback."""

    def __init__(self, step, message=""):
        self.step = step
        super().__init__(f"singular regression at step {step}" + (f": {message}" if message else ""))


class NonPSD(RsmpError):
    """A matrix that must stay symmetric positive (semi)definite lost that property."""


class UnknownBenchmark(RsmpError):
    """Benchmark name not in the registry."""
