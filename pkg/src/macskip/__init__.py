"""macskip: input-aware MAC skipping for small fixed-point CNNs.

Inference engine plus benchmark tooling: per-layer threshold
calibration, reuse-aware skip kernels with hardware-style division
surrogates, magnitude/FATReLU pruning baselines, an MCU cycle model,
and a binary model container with IDX data loading.
"""

from .costmodel import CostProfile, MSP430_PROFILE, load_profile, price
from .divapprox import DivMethod, ExponentTree, ZERO_EXPONENT
from .errors import DataError, MacskipError, UsageError
from .kernels import LayerKind, MacStats, ModelGraph, PruneConfig, RunMode
from .numerics import Q8_8, QFormat
from .tensor import Shape, Tensor

__version__ = "0.1.0"

__all__ = [
    "CostProfile",
    "DataError",
    "DivMethod",
    "ExponentTree",
    "LayerKind",
    "MSP430_PROFILE",
    "MacStats",
    "MacskipError",
    "ModelGraph",
    "PruneConfig",
    "Q8_8",
    "QFormat",
    "RunMode",
    "Shape",
    "Tensor",
    "UsageError",
    "ZERO_EXPONENT",
    "load_profile",
    "price",
    "__version__",
]
