# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import numpy as np

from ..log import InvalidInputError
from ..quant_format import (
    QuantizedMatrix, Granularity, group_bounds, grid_columns, to_half, check_shape,
)

__all__ = ["ScaleMode", "quantize_matrix", "calibrate_grids", "round_to_grids",
           "calibrate_block", "round_block",
           "MSE_GRID_CANDIDATES", "MSE_GRID_LOW"]


class ScaleMode:
    "Collection of valid grid calibration modes."
    MINMAX = "minmax"
    MSE_GRID = "mse_grid"

    ALL = (MINMAX, MSE_GRID)


# Candidate scale multipliers for the MSE grid search span [0.3, 1.0]
MSE_GRID_CANDIDATES = 100
MSE_GRID_LOW = 0.3


def _grids_from_range(lo, hi, cfg):
    """Vectorized min-max grids for columns with extremes lo and hi.

    Scales are snapped to half precision; zero-points follow the snapped
    scale.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    q_min, q_max = cfg.q_min, cfg.q_max
    if cfg.symmetric:
        w_abs = np.maximum(np.abs(lo), np.abs(hi))
        scale = np.where(w_abs > 0, w_abs / q_max, 1.0)
        scale = to_half(scale)
        return scale, np.zeros(scale.shape, dtype=np.int16)
    span = hi - lo
    scale = np.where(span > 0, span / (q_max - q_min), 1.0)
    scale = to_half(scale)
    zero = np.clip(np.rint(q_min - lo / scale), q_min, q_max).astype(np.int16)
    return scale, zero


def round_block(B, scale, zero, cfg):
    codes = np.clip(np.rint(B / scale) + zero, cfg.q_min, cfg.q_max)
    return codes.astype(np.int16)


def _block_error(B, scale, zero, cfg):
    codes = round_block(B, scale, zero, cfg)
    recon = scale * (codes.astype(np.float64) - zero)
    return ((B - recon) ** 2).sum(axis=0)


def calibrate_block(B, cfg, scale_mode):
    """Grids for a block of shape (rows, C): one grid per column."""
    lo, hi = B.min(axis=0), B.max(axis=0)
    scale, zero = _grids_from_range(lo, hi, cfg)
    if scale_mode == ScaleMode.MINMAX:
        return scale, zero
    # Search shrunk ranges, starting from the min-max grid so ties keep it
    best_err = _block_error(B, scale, zero, cfg)
    for p in np.linspace(1.0, MSE_GRID_LOW, MSE_GRID_CANDIDATES)[1:]:
        s, z = _grids_from_range(p * lo, p * hi, cfg)
        err = _block_error(B, s, z, cfg)
        better = err < best_err
        if np.any(better):
            scale = np.where(better, s, scale)
            zero = np.where(better, z, zero)
            best_err = np.where(better, err, best_err)
    return scale.astype(np.float32), zero.astype(np.int16)


def _blocks(W, cfg):
    """Yield (k, start, stop, block) where block has one column per grid."""
    N, M = W.shape
    for k, (start, stop) in enumerate(group_bounds(N, cfg)):
        block = W[start:stop]
        if cfg.granularity == Granularity.PER_TENSOR:
            block = block.reshape(-1, 1)
        yield k, start, stop, block


def calibrate_grids(W, cfg, scale_mode=ScaleMode.MINMAX):
    """Calibrate every group grid of W, returning (scales, zeros) of shape (K, C)."""
    if scale_mode not in ScaleMode.ALL:
        raise InvalidInputError('unknown scale mode %r' % (scale_mode,))
    W = np.asarray(W, dtype=np.float64)
    check_shape(W.shape, cfg)
    N, M = W.shape
    K, C = len(group_bounds(N, cfg)), grid_columns(M, cfg)
    scales = np.empty((K, C), dtype=np.float32)
    zeros = np.empty((K, C), dtype=np.int16)
    for k, start, stop, block in _blocks(W, cfg):
        scales[k], zeros[k] = calibrate_block(block, cfg, scale_mode)
    return scales, zeros


def round_to_grids(W, cfg, scales, zeros):
    """Nearest-level codes of W under fixed grids."""
    W = np.asarray(W, dtype=np.float64)
    N, M = W.shape
    codes = np.empty((N, M), dtype=np.int16)
    for k, (start, stop) in enumerate(group_bounds(N, cfg)):
        s = scales[k].astype(np.float64)
        codes[start:stop] = round_block(W[start:stop], s, zeros[k], cfg)
    return QuantizedMatrix(cfg, codes, scales, zeros)


def quantize_matrix(W, cfg, scale_mode=ScaleMode.MINMAX):
    """Round-to-nearest quantization of W with calibrated group grids.

    For fixed grids, nearest rounding minimizes ||W - W_hat||_F^2 exactly.
    """
    scales, zeros = calibrate_grids(W, cfg, scale_mode)
    return round_to_grids(W, cfg, scales, zeros)
