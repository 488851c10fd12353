class InvalidArgument(ValueError):
    pass


class InadmissibleGeometry(ValueError):
    """Surface elevation below the bed somewhere."""


class SolverFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonConvergence(RuntimeError):
    """An iteration hit its cap; `last` holds the final iterate or residual."""

    def __init__(self, message, last=None, residual=None):
        super().__init__(message)
        self.last = last
        self.residual = residual
