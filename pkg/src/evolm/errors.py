"""Exception types shared across the package."""


class EvolmError(Exception):
    """Base class for all package errors."""


class DimensionError(EvolmError, ValueError):
    pass


class ContractError(EvolmError, ValueError):
    """A documented precondition was violated by the caller."""


class VocabularyError(EvolmError, ValueError):
    pass


class EmptyCorpusError(EvolmError, ValueError):
    pass


class DataError(EvolmError, ValueError):
    pass


class ConfigError(EvolmError, ValueError):
    pass


class IntegrityError(EvolmError):
    """A checkpoint file failed validation."""


class DivergenceError(EvolmError, RuntimeError):
    """Training produced a non-finite loss."""
