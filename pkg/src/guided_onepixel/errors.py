"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Input array does not match the shape a model expects."""


class EmptyCorpusError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed weight or image file.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class VersionError(FormatError):
    pass


class EmptySusceptibilitySetError(ValueError):
    pass


class NotCorrectlyClassifiedError(ValueError):
    pass


class IngestionError(ValueError):
    """A corpus entry could not be loaded. ``entry`` names the offending item."""

    def __init__(self, message, entry=None):
        self.entry = entry
        super().__init__(message)


class DimensionMismatchError(IngestionError):
    pass


class BudgetExceededError(RuntimeError):
    def __init__(self, required, budget):
        self.required = required
        self.budget = budget
        super().__init__(f"oracle needs {required} evaluations, budget is {budget}")
