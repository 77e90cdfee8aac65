# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import itertools

import numpy as np

from qdesk.quant_format import QuantizedMatrix, dequantize
from qdesk.toymodel import ToyModel


def assert_close_rel(a, b, rtol):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(b).max(), np.finfo(float).tiny)
    assert np.abs(a - b).max() <= rtol * scale, (np.abs(a - b).max(), rtol * scale)


def nearest_level_oracle(W, Q):
    """Per-element nearest level under the grids of Q, by enumerating every code."""
    scales, zeros = Q.element_grids()
    codes = np.arange(Q.q_min, Q.q_max + 1)
    out = np.empty(W.shape)
    for i, j in itertools.product(range(W.shape[0]), range(W.shape[1])):
        levels = float(scales[i, j]) * (codes - int(zeros[i, j]))
        out[i, j] = levels[np.argmin(np.abs(W[i, j] - levels))]
    return out


def brute_force_codes(W, H, cfg, scales, zeros):
    """Minimize tr(D^T H D) over all code assignments of a tiny matrix with fixed grids."""
    N, M = W.shape
    levels = range(cfg.q_min, cfg.q_max + 1)
    best, best_Q = None, None
    for flat in itertools.product(levels, repeat=N * M):
        Q = QuantizedMatrix(cfg, np.array(flat).reshape(N, M), scales, zeros)
        D = dequantize(Q).astype(np.float64) - W
        value = float(np.sum(D * (H @ D)))
        if best is None or value < best:
            best, best_Q = value, Q
    return best_Q, best


def with_outlier_channels(model, seed=0, n_channels=2, factor=25.0):
    """Copy of a toy model whose norm gains spike on a few hidden channels.

    The spikes show up as large input activations of every projection
    reading the normalized stream.
    """
    rng = np.random.default_rng(seed)
    weights = dict(model.weights)
    d = model.config.d
    channels = rng.choice(d, size=n_channels, replace=False)
    for name in list(weights):
        if name.startswith('norm.'):
            gain = weights[name].copy()
            gain[channels] *= factor
            weights[name] = gain
    return ToyModel(model.config, weights)
