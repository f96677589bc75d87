from typing import Any, Optional


class PararealLabError(Exception):
    """Base error. `detail` is what the CLI prints."""

    exit_code = 3

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(PararealLabError):
    exit_code = 2


class NumericalError(PararealLabError):
    exit_code = 3


class DimensionError(NumericalError, ValueError):
    pass


class UnsupportedTransformError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, detail: str, best: Any = None, residual: float = float("nan")):
        super().__init__(detail)
        self.best = best
        self.residual = residual


class NonFiniteStateError(NumericalError):
    def __init__(self, detail: str, iteration: Optional[int] = None, index: Optional[int] = None):
        super().__init__(detail)
        self.iteration = iteration
        self.index = index


class ShellUnreachableError(NumericalError):
    def __init__(self, detail: str, chain: Optional[int] = None, step: Optional[int] = None):
        super().__init__(detail)
        self.chain = chain
        self.step = step


class WorkerError(NumericalError):
    def __init__(self, detail: str, index: int):
        super().__init__(detail)
        self.index = index
