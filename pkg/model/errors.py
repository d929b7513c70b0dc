"""
Exception types shared by the flow inference engine.
"""


class FlowError(Exception):
    """Base class for every error raised by the engine."""


class FlowInputError(FlowError, ValueError):
    """Malformed or inconsistent input data (shapes, signs, ids, files)."""


class FlowModelError(FlowError):
    """The model cannot be evaluated for the supplied parameters."""


class NonFiniteLikelihoodError(FlowModelError):
    """A likelihood term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"Likelihood term {term} is not finite ({value!r})")
