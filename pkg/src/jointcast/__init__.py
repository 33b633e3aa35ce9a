"""Joint air-quality and weather forecasting on heterogeneous station graphs."""
from .errors import ConfigError, ContractError, DataError, DimensionError, JointcastError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DataError", "DimensionError", "JointcastError",
           "ValidationError", "__version__"]
