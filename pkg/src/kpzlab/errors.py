"""Exception types shared across the package."""


class UsageError(ValueError):
    """Bad arguments supplied by the caller."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class NumericalError(RuntimeError):
    """A numerical procedure failed to reach its tolerance."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class BlowUpError(NumericalError):
    """Integrator produced a non-finite or overflowing state."""

    def __init__(self, message, step=None, **diagnostics):
        super().__init__(message, step=step, **diagnostics)
        self.step = step
