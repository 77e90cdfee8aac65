# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Hessian-aware sequential rounding with inverse-Hessian error feedback."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, LinAlgError

from ..log import InvalidInputError, NumericalError
from .. import log
from ..quant_format import QuantizedMatrix, Granularity, group_bounds, grid_columns, check_shape
from .rtn import ScaleMode, calibrate_block, round_block

__all__ = ["GptqOptions", "gptq_quantize", "damped_hessian", "process_order", "layer_objective"]


@dataclass(frozen=True)
class GptqOptions:
    actorder: bool = False
    percdamp: float = 0.01
    block_cols: int = 128
    scale_mode: str = ScaleMode.MINMAX

    def __post_init__(self):
        if not 0 < self.percdamp <= 1:
            raise InvalidInputError('percdamp must lie in (0, 1], got %r' % (self.percdamp,))
        if self.block_cols < 1:
            raise InvalidInputError('block_cols must be positive')
        if self.scale_mode not in ScaleMode.ALL:
            raise InvalidInputError('unknown scale mode %r' % (self.scale_mode,))


def layer_objective(W, W_hat, H):
    """tr((W_hat - W)^T H (W_hat - W)), i.e. ||X (W_hat - W)||_F^2 for H = X^T X."""
    D = np.asarray(W_hat, dtype=np.float64) - np.asarray(W, dtype=np.float64)
    return float(np.sum(D * (np.asarray(H, dtype=np.float64) @ D)))


def damped_hessian(H, percdamp):
    H = np.array(H, dtype=np.float64)
    diag = np.diag(H).copy()
    # Inputs that never fire carry no information; give them unit curvature
    dead = diag == 0
    H[dead, dead] = 1.0
    damp = percdamp * np.mean(np.diag(H))
    H[np.diag_indices_from(H)] += damp
    return H


def process_order(H, actorder):
    """Input indices in processing order: descending diag(H) when actorder."""
    n = H.shape[0]
    if not actorder:
        return np.arange(n)
    return np.argsort(-np.diag(H), kind='stable')


def _inverse_cholesky(H):
    """Upper factor U with U^T U = H^{-1}."""
    try:
        Hinv = cho_solve(cho_factor(H), np.eye(H.shape[0]))
        return cholesky(Hinv, lower=False)
    except (LinAlgError, ValueError) as e:
        raise NumericalError('Hessian is not positive definite after dampening: %s' % e)


def _row_groups(N, cfg):
    "Grid run index of every input index."
    groups = np.empty(N, dtype=int)
    for k, (start, stop) in enumerate(group_bounds(N, cfg)):
        groups[start:stop] = k
    return groups


def gptq_quantize(W, H, cfg, opts=None, grids=None):
    """Quantize W (N x M) against the Gram matrix H (N x N).

    Input indices are visited one at a time; each rounding residual is
    pushed onto the indices not yet visited through the upper Cholesky
    factor of the inverse Hessian. Group grids are calibrated on the
    current (already compensated) weights when their first index is
    visited, unless fixed `grids=(scales, zeros)` are given.
    """
    opts = opts or GptqOptions()
    W = np.array(W, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    check_shape(W.shape, cfg)
    N, M = W.shape
    if H.shape != (N, N):
        raise InvalidInputError('Hessian of shape %r for weight of shape %r' % (H.shape, W.shape))
    if not np.all(np.isfinite(H)):
        raise NumericalError('Hessian has non-finite entries')

    bounds = group_bounds(N, cfg)
    K, C = len(bounds), grid_columns(M, cfg)
    if grids is not None:
        scales = np.asarray(grids[0], dtype=np.float32).copy()
        zeros = np.asarray(grids[1], dtype=np.int16).copy()
        if scales.shape != (K, C) or zeros.shape != (K, C):
            raise InvalidInputError('static grids must have shape %r' % ((K, C),))
        ready = np.ones(K, dtype=bool)
    else:
        scales = np.empty((K, C), dtype=np.float32)
        zeros = np.empty((K, C), dtype=np.int16)
        ready = np.zeros(K, dtype=bool)

    Hd = damped_hessian(H, opts.percdamp)
    perm = process_order(Hd, opts.actorder)
    U = _inverse_cholesky(Hd[np.ix_(perm, perm)])
    Wp = W[perm]
    inv = np.argsort(perm)
    groups = _row_groups(N, cfg)
    codes = np.empty((N, M), dtype=np.int16)

    for b0 in range(0, N, opts.block_cols):
        b1 = min(b0 + opts.block_cols, N)
        Err = np.zeros((b1 - b0, M))
        for i in range(b0, b1):
            row = perm[i]
            k = groups[row]
            if not ready[k]:
                start, stop = bounds[k]
                current = Wp[inv[start:stop]]
                block = current.reshape(-1, 1) if cfg.granularity == Granularity.PER_TENSOR else current
                scales[k], zeros[k] = calibrate_block(block, cfg, opts.scale_mode)
                ready[k] = True
            s = scales[k].astype(np.float64)
            z = zeros[k]
            w = Wp[i]
            q = round_block(w, s, z, cfg)
            codes[row] = q
            err = (w - s * (q.astype(np.float64) - z)) / U[i, i]
            Err[i - b0] = err
            # Lazy update inside the block
            Wp[i + 1:b1] -= np.outer(U[i, i + 1:b1], err)
        Wp[b1:] -= U[b0:b1, b1:].T @ Err

    log.debug('gptq: %dx%d %s actorder=%s', N, M, cfg.label(), opts.actorder)
    return QuantizedMatrix(cfg, codes, scales, zeros)
