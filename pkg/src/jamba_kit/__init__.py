"""Hybrid Transformer-Mamba-MoE language model at desk scale, in numpy."""

__version__ = "0.1.0"

from .config import JambaConfig, MambaSettings, layer_plan, load_config, model_preset
from .errors import (
    CacheError,
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    JambaError,
    PresetLookupError,
    TrainingError,
)
from .model import HybridCache, JambaModel, build_model, count_params, decode_step, forward, generate
from .tensor import Tensor, backward

__all__ = [
    "CacheError", "ConfigError", "ContractError", "DimensionError", "HybridCache", "InputError", "JambaConfig",
    "JambaError", "JambaModel", "MambaSettings", "PresetLookupError", "Tensor", "TrainingError", "backward",
    "build_model", "count_params", "decode_step", "forward", "generate", "layer_plan", "load_config", "model_preset",
]
