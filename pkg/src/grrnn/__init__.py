"""Global-context residual recurrent networks for writer identification."""

from .backbone import BackboneConfig, count_flops, count_params
from .model import GRRNN
from .variants import Axis, Kind, ModelVariant

__version__ = "0.1.0"
__all__ = ["GRRNN", "BackboneConfig", "ModelVariant", "Kind", "Axis",
           "count_params", "count_flops"]
