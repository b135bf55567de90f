# circuitlab/core/errors.py
"""Exception hierarchy shared by every layer.

Value-type problems also derive from ValueError so generic callers can catch them.
"""


class CircuitLabError(Exception):
    """Base class for all errors raised by circuitlab"""


class ShapeError(CircuitLabError, ValueError):
    pass


class NonFiniteError(CircuitLabError, ArithmeticError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        message = f"non-finite value produced by {op}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class TapeError(CircuitLabError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "tape error"


class ConfigError(CircuitLabError, ValueError):
    pass


class TokenizerError(CircuitLabError, ValueError):
    pass


class DatasetError(CircuitLabError, ValueError):
    pass


class GraphError(CircuitLabError, ValueError):
    """Unknown node/edge or an out-of-range layer, head or position"""


class PatchError(CircuitLabError, ValueError):
    pass


class TrainingDivergedError(CircuitLabError):
    def __init__(self, step: int, loss: float = float("nan")):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class MetricError(CircuitLabError, ValueError):
    pass


class DegenerateMetricError(MetricError):
    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(
            f"pair {index} has a degenerate clean/corrupt logit difference ({value:.3e})"
        )


class CircuitError(CircuitLabError, ValueError):
    pass


class InterventionError(CircuitLabError, ValueError):
    pass


class ProbeError(CircuitLabError, ValueError):
    pass


class CheckpointError(CircuitLabError):
    pass
