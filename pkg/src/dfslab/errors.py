"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions incompatible with the requested operation."""


class GraphError(ValueError):
    """Tape structure violated (unknown node id, parameter not on tape)."""


class ContractError(ValueError):
    """An API precondition violated (non-scalar loss, mismatched update shapes)."""


class ConfigError(ValueError):
    """Invalid model/run configuration."""


class DataError(ValueError):
    """Bad dataset contents (label out of range, empty split)."""


class FormatError(ValueError):
    """Malformed binary file (checkpoint, IDX)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class RoutingViolation(Exception):
    """Gradient reached (or missed) a weight block that the wiring forbids."""

    def __init__(self, layer, clause, message):
        self.layer = layer
        self.clause = clause
        super().__init__(f"layer {layer}, clause {clause}: {message}")


class AccountingViolation(Exception):
    """Measured operation counts disagree with the closed-form model."""


class BudgetError(ValueError):
    """Budget below the cheapest exit's cost."""
