"""evolm: a numpy encoder LM with self-evolution pretraining and prompt-transfer adaptation."""
from .errors import (ConfigError, ContractError, DataError, DimensionError, DivergenceError,
                     EmptyCorpusError, EvolmError, IntegrityError, VocabularyError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DataError", "DimensionError", "DivergenceError",
           "EmptyCorpusError", "EvolmError", "IntegrityError", "VocabularyError", "__version__"]
