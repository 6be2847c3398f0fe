"""Exception and warning types shared across the pipeline."""


class FWSError(Exception):
    """Base class for every error raised by the pipeline."""


class RangeError(FWSError, ValueError):
    """A parameter lies outside the range an operation accepts."""


class ContractError(FWSError, ValueError):
    """Inputs violate a shape or batch-size contract."""


class ConfigError(FWSError, ValueError):
    """The run configuration is invalid or does not match a stored manifest."""


class DatasetError(FWSError, ValueError):
    """A dataset directory is malformed."""


class DivergenceError(FWSError, RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, step: int | None = None, offending: list[str] | None = None,
                 epoch: int | None = None):
        self.step = step
        self.epoch = epoch
        self.offending = offending or []
        detail = message
        if step is not None:
            detail += f" (step {step}" + (f", epoch {epoch})" if epoch is not None else ")")
        if self.offending:
            detail += f"; non-finite in: {', '.join(self.offending[:8])}"
            if len(self.offending) > 8:
                detail += f" and {len(self.offending) - 8} more"
        super().__init__(detail)


class SparseLabelWarning(UserWarning):
    """A sparsification produced a label with no annotated pixel."""


class ParameterBudgetWarning(UserWarning):
    """A network configuration exceeds the parameter budget."""
