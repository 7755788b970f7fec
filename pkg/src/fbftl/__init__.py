"""Simulator for feature-based federated transfer learning and gradient-based baselines."""

from .errors import ConfigError, DegenerateUploadError, DivergenceError, FbftlError, SizeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DegenerateUploadError", "DivergenceError", "FbftlError", "SizeError", "__version__"]
