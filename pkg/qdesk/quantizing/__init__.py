# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

from .rtn import quantize_matrix
from .gptq import gptq_quantize
from .qep import qep_target
from .layerwise import quantize_layer
from .jointq import jointq_refine
from .binfact import msvid_init, refine_alternating
from .lpcd import lpcd_refine

__all__ = ["quantize_matrix", "gptq_quantize", "qep_target", "quantize_layer", "jointq_refine",
           "msvid_init", "refine_alternating", "lpcd_refine"]
