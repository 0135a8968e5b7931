"""Exception types shared across the package.

Each maps onto a CLI exit code (see ``contsup.cli``).
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class IngestionError(RuntimeError):
    """A dataset could not be located or decoded."""


class InvariantViolation(RuntimeError):
    """A structural invariant (shapes, plan coverage, ...) does not hold."""


class NonFiniteLossError(FloatingPointError):
    """A local loss became NaN or infinite."""

    def __init__(self, module_index, value, step=None):
        self.module_index = module_index
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss {value!r} in module {module_index}{where}")
