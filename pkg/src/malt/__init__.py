"""MALT: hierarchical-encoder / recurrent-decoder transformer for online action detection."""
from .config import DataSpec, MaltConfig, tiny_config
from .model import build_model, forward, forward_windows, parameter_count

__all__ = ["DataSpec", "MaltConfig", "tiny_config", "build_model", "forward", "forward_windows",
           "parameter_count"]
