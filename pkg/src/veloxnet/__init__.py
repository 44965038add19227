"""VeloxNet: gMLP blocks with spatial gating in a SqueezeNet-style stack.

Pure-numpy layers with hand-written backward passes, graph builders for
VeloxNet and a reference SqueezeNet, static parameter/MAC accounting, a
bit-exact file format, and a small training and evaluation harness.
"""

from .accounting import cost_report, count_macs, count_params, emit_summary, storage_size
from .errors import (ConfigError, ConsistencyError, DataError, DimensionError, NumericError,
                     StateError, UsageError, VeloxError)
from .gmlp import GmlpBlock, GmlpConfig, SpatialGatingUnit
from .models import (AblationSpec, Model, ModelGraph, build_model_graph, build_squeezenet,
                     build_veloxnet)

__version__ = "0.1.0"

__all__ = [
    "AblationSpec", "ConfigError", "ConsistencyError", "DataError", "DimensionError",
    "GmlpBlock", "GmlpConfig", "Model", "ModelGraph", "NumericError", "SpatialGatingUnit",
    "StateError", "UsageError", "VeloxError", "build_model_graph", "build_squeezenet",
    "build_veloxnet", "cost_report", "count_macs", "count_params", "emit_summary",
    "storage_size",
]
