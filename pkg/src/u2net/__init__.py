"""Nested U-structure salient object detection, written on numpy.

The package holds a small reverse-mode autodiff core (:mod:`u2net.tensor`),
residual U-blocks (:mod:`u2net.rsu`), the two-level network
(:mod:`u2net.network`), training, evaluation measures, cost accounting and
a checkpoint format.
"""

from .errors import (CheckpointCorruptError, CheckpointError, CheckpointShapeError, CheckpointVersionError,
                     ConfigurationError, DataError, NumericalError, U2NetError, UsageError)
from .network import NetworkConfig, SaliencyOutputs, U2Net, build_network, forward, predict, preset_config
from .rsu import RsuBlock, RsuSpec, build_rsu, rsu_forward, rsu_receptive_field
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "CheckpointCorruptError", "CheckpointError", "CheckpointShapeError", "CheckpointVersionError",
    "ConfigurationError", "DataError", "NumericalError", "U2NetError", "UsageError",
    "NetworkConfig", "SaliencyOutputs", "U2Net", "build_network", "forward", "predict", "preset_config",
    "RsuBlock", "RsuSpec", "build_rsu", "rsu_forward", "rsu_receptive_field", "Tensor", "no_grad",
]
