from .audit import FlopReport, ParamReport, count_flops, count_parameters
from .config import ABLATIONS, ConfigError, MiniSegConfig
from .network import MiniSeg, build

__all__ = [
    "ABLATIONS",
    "ConfigError",
    "FlopReport",
    "MiniSeg",
    "MiniSegConfig",
    "ParamReport",
    "build",
    "count_flops",
    "count_parameters",
]

from .checkpoint import (  # noqa: E402
    CheckpointError,
    CorruptCheckpointError,
    ModelWeights,
    ShapeMismatchError,
    VersionMismatchError,
    apply_weights,
    load_checkpoint,
    load_model,
    save_checkpoint,
)

__all__ += [
    "CheckpointError",
    "CorruptCheckpointError",
    "ModelWeights",
    "ShapeMismatchError",
    "VersionMismatchError",
    "apply_weights",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
]
