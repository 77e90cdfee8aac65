# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

from ._version import __version__

from .log import (
    QdeskError, InvalidInputError, ConfigError, ContainerError, NumericalError,
    InfeasibleBudgetError, LayerQuantizationError,
)
from .quant_format import QuantConfig, QuantizedMatrix, dequantize, storage_bytes
from .toymodel import ToyModel, ToyModelConfig
from .calib import sample_calib, synthetic_corpus
from .autobit import plan, plan_model
from .pipeline import (
    QuantizedModel, inspect, run_layerwise_sweep, run_refiners, run_pipeline, PipelineConfig,
)


__all__ = [
    "__version__",
    "QdeskError", "InvalidInputError", "ConfigError", "ContainerError", "NumericalError",
    "InfeasibleBudgetError", "LayerQuantizationError",
    "QuantConfig", "QuantizedMatrix", "dequantize", "storage_bytes",
    "ToyModel", "ToyModelConfig", "sample_calib", "synthetic_corpus",
    "plan", "plan_model",
    "QuantizedModel", "inspect", "run_layerwise_sweep", "run_refiners", "run_pipeline",
    "PipelineConfig",
    ]
