"""Unsupervised 3-D deconvolution with optimal-transport cycle networks."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, FormatError, NumericalError, OtdeconvError, ShapeError  # noqa: E402
from .volume import Volume, read_volume, write_volume  # noqa: E402

__all__ = [
    "__version__", "Volume", "read_volume", "write_volume",
    "ConfigError", "ContractError", "FormatError", "NumericalError", "OtdeconvError", "ShapeError",
]
