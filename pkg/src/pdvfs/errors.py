"""Exception hierarchy shared by all modules."""


class PdvfsError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(PdvfsError, ValueError):
    """Invalid argument to a public operation."""


class ModelError(PdvfsError):
    """Malformed performance model or a query it cannot answer."""


class SimulationError(PdvfsError):
    """The simulator cannot make progress (e.g. KV admission impossible)."""


class ConfigurationError(PdvfsError):
    """A placement plan or experiment config is structurally unusable."""


class AccountingError(PdvfsError):
    """Batch records violate the energy accounting preconditions."""


class ComparisonError(PdvfsError):
    """Reports passed to a comparison do not describe the same window."""


class InfeasibleError(PdvfsError):
    """The placement problem has no solution.

    ``binding`` names the constraint that cannot be satisfied: one of
    ``"gpu_capacity"``, ``"prefill_goodput"`` or ``"decode_goodput"``.
    """

    def __init__(self, binding: str, message: str):
        super().__init__(f"{binding}: {message}")
        self.binding = binding
