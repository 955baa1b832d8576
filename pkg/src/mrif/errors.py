"""Exception types shared across the package."""


class MrifError(Exception):
    """Base class for all package errors."""


class DimensionError(MrifError, ValueError):
    pass


class DegenerateRowError(MrifError, ValueError):
    """A softmax row with no unmasked entry, or a sequence with no real item."""


class NonFiniteError(MrifError, FloatingPointError):
    pass


class ContractError(MrifError, ValueError):
    pass


class VocabularyLookupError(MrifError, IndexError):
    pass


class DataFormatError(MrifError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyLogError(MrifError, ValueError):
    pass


class EmptyCoreError(MrifError, ValueError):
    pass


class InsufficientNegativesError(MrifError, ValueError):
    pass


class CheckpointError(MrifError, ValueError):
    pass


class EvaluationError(MrifError, ValueError):
    pass
