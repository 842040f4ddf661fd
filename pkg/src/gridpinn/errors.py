"""Exception hierarchy shared across the package."""


class GridPinnError(Exception):
    """Base class for all package errors."""


class ContractError(GridPinnError, ValueError):
    """A caller violated an operation's preconditions."""


class ParseError(GridPinnError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(GridPinnError, ValueError):
    """A structurally parsed case violates a network invariant."""


class SingularBranchError(GridPinnError, ValueError):
    pass


class SingularJacobianError(GridPinnError, ArithmeticError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"power-flow Jacobian is singular at iteration {iteration}")


class GenerationError(GridPinnError, RuntimeError):
    """Dataset synthesis failed, typically a non-converged operating point."""


class TrainingError(GridPinnError, RuntimeError):
    pass


class ConfigError(GridPinnError, ValueError):
    pass
