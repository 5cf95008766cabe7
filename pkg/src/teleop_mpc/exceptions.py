"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An argument violated a documented precondition (dimension, domain, finiteness)."""


class NumericalError(RuntimeError):
    """A computation produced a non-finite value."""


class RolloutDivergenceError(NumericalError):
    """Forward integration produced a non-finite state.

    Carries the index of the first failing knot.
    """

    def __init__(self, knot: int, message: str = ""):
        self.knot = knot
        super().__init__(message or f"rollout diverged at knot {knot}")


class SolverError(RuntimeError):
    """The trajectory optimizer could not produce a usable policy."""


class ConfigError(ValueError):
    """Experiment configuration failed validation.

    ``problems`` lists one human-readable message per offending path.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


class ProtocolError(ValueError):
    """A wire message failed to parse or validate."""
