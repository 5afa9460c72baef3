from .core import (
    ConfigError,
    DivergenceError,
    MissingAuxiliaryError,
    ModelAdapter,
    ParamScope,
    SittaError,
    load_adapter,
    restore_weights,
    select_params,
    snapshot_weights,
)
from .tta import AdaptationRecord, AuxModels, LossKind, Method, TTAConfig, adapt_single_image

__all__ = [
    "AdaptationRecord",
    "AuxModels",
    "ConfigError",
    "DivergenceError",
    "LossKind",
    "Method",
    "MissingAuxiliaryError",
    "ModelAdapter",
    "ParamScope",
    "SittaError",
    "TTAConfig",
    "adapt_single_image",
    "load_adapter",
    "restore_weights",
    "select_params",
    "snapshot_weights",
]

__version__ = "0.1.0"
