"""Exception and warning types raised across the package."""

import numpy as np


class LyapctlError(Exception):
    """Base class for errors raised by this package."""


class NumericOverflowError(LyapctlError, ArithmeticError):
    def __init__(self, state):
        self.state = np.asarray(state, dtype=float).copy()
        super().__init__(f"non-finite state produced from {self.state}")


class LinearizationError(LyapctlError):
    pass


class ReferenceInadmissibleError(LyapctlError):
    pass


class SingularSystemError(LyapctlError, np.linalg.LinAlgError):
    pass


class DareError(LyapctlError):
    pass


class DatasetDegenerateError(LyapctlError):
    def __init__(self, failures: int, total: int):
        self.failures = failures
        self.total = total
        super().__init__(f"{failures}/{total} grid points failed to solve")


class FormatError(LyapctlError):
    pass


class TrainingDivergedError(LyapctlError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"training loss became non-finite at epoch {epoch}")


class NetworkNumericError(LyapctlError, ArithmeticError):
    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite activation in layer {layer}")


class DivergenceError(LyapctlError):
    def __init__(self, step: int, state):
        self.step = step
        self.state = np.asarray(state, dtype=float).copy()
        super().__init__(f"state {self.state} left the safety box at step {step}")


class BoundUndefinedError(LyapctlError, ValueError):
    pass


class StabilizabilityWarning(UserWarning):
    pass
