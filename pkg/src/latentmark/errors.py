"""Exception taxonomy shared by all modules.

Every toolkit error carries a machine-readable ``category`` so the CLI can
map failures to stable exit diagnostics.
"""


class ToolkitError(Exception):
    category = "error"


class InvalidArgumentError(ToolkitError, ValueError):
    category = "invalid-argument"


class InfeasibleThresholdError(ToolkitError):
    category = "infeasible"


class TrainingFailureError(ToolkitError):
    """Training could not reach a contracted gate within budget.

    ``diagnostics`` holds the best point reached so failures stay debuggable.
    """

    category = "training-failure"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ScenarioViolationError(ToolkitError):
    category = "scenario-violation"


class ConfigError(ToolkitError):
    category = "config"


class DependencyError(ToolkitError):
    """An upstream artifact is missing; names the subcommand that produces it."""

    category = "dependency"

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer


class NumericalFailureError(ToolkitError):
    category = "numerical-failure"
