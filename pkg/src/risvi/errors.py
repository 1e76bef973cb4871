"""Exception hierarchy shared by all modules."""


class RisViError(Exception):
    """Base class for every error raised by the package."""


class InvalidDimensionError(RisViError, ValueError):
    pass


class ContractViolation(RisViError, ValueError):
    """An argument breaks a documented precondition."""


class NumericalFailure(RisViError, ArithmeticError):
    """A factorization or update produced non-finite or indefinite results.

    ``index`` locates the offending item of a batched computation, when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingFailure(RisViError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(RisViError, ValueError):
    pass


class MissingArtifactError(RisViError, FileNotFoundError):
    pass
