"""Multimodal 2D/3D fusion models on a self-contained numpy autodiff core."""

from .backbones import Backbone, BackboneSpec, FeatureShape, stage_shapes
from .errors import ConfigError, InputError, NumericFault, UsageError
from .fusion_models import (ConversionParams, FusionConfig, build_model,
                            conversion_params, predict)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneSpec", "FeatureShape", "stage_shapes",
    "ConfigError", "InputError", "NumericFault", "UsageError",
    "ConversionParams", "FusionConfig", "build_model", "conversion_params", "predict",
    "Tensor", "no_grad", "__version__",
]
