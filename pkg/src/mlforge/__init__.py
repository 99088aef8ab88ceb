"""mlforge: multi-label dataset curation, imbalance-aware training, and a
deterministic simulator of synchronous data-parallel SGD."""

__version__ = "0.1.0"

from .errors import DataError, MLForgeError, NumericalError  # noqa: F401
