"""Split-placement federated fine-tuning of a toy sequential recommender."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractViolation, NotFoundError, NumericError  # noqa: E402

__all__ = ["ConfigError", "ContractViolation", "NotFoundError", "NumericError", "__version__"]
