"""
Wavelet / state-space pansharpening on a small numpy autodiff core
"""

from .errors import FormatError, NumericalError, S2WError, ShapeError, UsageError
from .models import AblationConfig, MetricsReport, NetworkConfig, SceneSpec, TrainConfig

__all__ = [
    "AblationConfig",
    "FormatError",
    "MetricsReport",
    "NetworkConfig",
    "NumericalError",
    "S2WError",
    "SceneSpec",
    "ShapeError",
    "TrainConfig",
    "UsageError",
]
