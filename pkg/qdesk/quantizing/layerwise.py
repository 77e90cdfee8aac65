# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

from ..log import InvalidInputError
from .rtn import ScaleMode, quantize_matrix
from .gptq import GptqOptions, gptq_quantize
from .qep import qep_target


class Method:
    "Collection of base quantizers for one layer."
    RTN = "rtn"
    GPTQ = "gptq"

    ALL = (RTN, GPTQ)


def quantize_layer(W, stats, cfg, method=Method.RTN, qep=None, gptq=None,
                   scale_mode=ScaleMode.MINMAX):
    """Quantize one layer against its calibration statistics.

    When `qep` options are given the target is first corrected for
    upstream quantization error, then handed to the base quantizer.
    """
    if method not in Method.ALL:
        raise InvalidInputError('unknown method %r, expected one of %r' % (method, Method.ALL))
    target = qep_target(W, stats, qep) if qep is not None else W
    if method == Method.RTN:
        return quantize_matrix(target, cfg, scale_mode)
    if gptq is None:
        gptq = GptqOptions(scale_mode=scale_mode)
    return gptq_quantize(target, stats.gram, cfg, gptq)
