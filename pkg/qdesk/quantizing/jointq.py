# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Local search over integer codes and group scales of a uniform checkpoint.

The search minimizes

    ||X W - X W_hat||_F^2 + n * lambda * ||W - W_hat||_F^2

(n the number of rows of X), which is the plain output error on the
augmented input [X; sqrt(n lambda) I]. Every proposal changes one code (or
one zero-point) and re-fits the scale of the affected group in closed form;
only strictly improving proposals are kept. The output has the same format
and storage size as the input.
"""

from dataclasses import dataclass

import numpy as np

from ..log import InvalidInputError
from .. import log
from ..quant_format import QuantizedMatrix, dequantize, group_bounds, to_half

__all__ = ["JointqOptions", "JointqResult", "jointq_refine", "jointq_objective",
           "refit_group_scale", "regularized_gram"]


@dataclass(frozen=True)
class JointqOptions:
    lam: float = 0.2
    max_passes: int = 8
    move_radius: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError('jointq lambda must be non-negative')
        if self.max_passes < 1 or self.move_radius < 1:
            raise InvalidInputError('jointq needs max_passes >= 1 and move_radius >= 1')


@dataclass
class JointqResult:
    quantized: QuantizedMatrix
    trace: list
    accepted: int
    passes: int


def regularized_gram(X, lam):
    """X^T X + n lambda I, the Gram matrix of the augmented input."""
    X = np.asarray(X, dtype=np.float64)
    n, N = X.shape
    return X.T @ X + n * lam * np.eye(N)


def jointq_objective(Q, W, X, lam):
    """||X W - X W_hat||_F^2 + n lambda ||W - W_hat||_F^2 with n = rows of X."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    W_hat = dequantize(Q).astype(np.float64) if isinstance(Q, QuantizedMatrix) else np.asarray(Q)
    if X.shape[1] != W.shape[0] or W.shape != W_hat.shape:
        raise InvalidInputError('inconsistent shapes X %r, W %r, W_hat %r' % (
            X.shape, W.shape, W_hat.shape))
    D = W - W_hat
    return float(np.sum((X @ D) ** 2) + X.shape[0] * lam * np.sum(D * D))


def refit_group_scale(codes, grad, H_block, w_hat_old):
    """Least-squares scale for a group given its centered codes.

    With residual R = W - W_hat, grad = (H R) on the group's rows and
    columns, the objective as a function of the group scale s is minimized
    at  s* = <c, grad + H_gg w_old> / <c, H_gg c>. Returns None when the
    codes carry no curvature.
    """
    c = np.asarray(codes, dtype=np.float64)
    denom = float(np.sum(c * (H_block @ c)))
    if not denom > 0:
        return None
    return float(np.sum(c * (grad + H_block @ w_hat_old))) / denom


class _Search(object):
    """Mutable state of one local search."""

    def __init__(self, Q, W, Ht):
        self.cfg = Q.config
        self.codes = Q.codes.astype(np.int64)
        self.scales = Q.scales.copy()
        self.zeros = Q.zeros.astype(np.int64)
        self.W = W
        self.Ht = Ht
        N, M = W.shape
        self.bounds = group_bounds(N, self.cfg)
        self.per_tensor = self.scales.shape[1] == 1 and M > 1
        self.W_hat = dequantize(Q).astype(np.float64)
        self.R = W - self.W_hat
        self.G = Ht @ self.R

    def objective(self):
        return float(np.sum(self.R * self.G))

    def group_cols(self, c):
        return slice(None) if self.scales.shape[1] == 1 else slice(c, c + 1)

    def evaluate(self, k, c, new_centered):
        """(gain, scale) of replacing group (k, c) by `new_centered` codes with a re-fitted scale."""
        start, stop = self.bounds[k]
        cols = self.group_cols(c)
        H_block = self.Ht[start:stop, start:stop]
        old = self.W_hat[start:stop, cols]
        grad = self.G[start:stop, cols]
        s = refit_group_scale(new_centered, grad, H_block, old)
        if s is None or not np.isfinite(s) or s <= 0:
            return None, None
        s = float(to_half(s))
        D = old - s * new_centered
        # Objective change of R -> R + D on the group block
        delta = 2.0 * np.sum(D * grad) + np.sum(D * (H_block @ D))
        return -float(delta), s

    def apply(self, k, c, new_centered, s):
        start, stop = self.bounds[k]
        cols = self.group_cols(c)
        new_hat = s * new_centered
        D = self.W_hat[start:stop, cols] - new_hat
        self.W_hat[start:stop, cols] = new_hat
        self.R[start:stop, cols] += D
        self.G[:, cols] += self.Ht[:, start:stop] @ D
        self.scales[k, c] = s

    def centered(self, k, c):
        start, stop = self.bounds[k]
        cols = self.group_cols(c)
        return (self.codes[start:stop, cols] - self.zeros[k, c]).astype(np.float64)

    def to_quantized(self):
        return QuantizedMatrix(self.cfg, self.codes, self.scales, self.zeros)


def _deltas(radius):
    out = []
    for r in range(1, radius + 1):
        out += [-r, r]
    return out


def _group_of(i, j, search):
    k = i // search.cfg.group_size if len(search.bounds) > 1 else 0
    c = 0 if search.scales.shape[1] == 1 else j
    return k, c


def jointq_refine(Q0, W, X, opts=None):
    """Refine a uniform checkpoint Q0 of W on inputs X.

    Returns a JointqResult whose `trace` holds the objective at the start
    and after every pass that accepted at least one move.
    """
    opts = opts or JointqOptions()
    if not isinstance(Q0, QuantizedMatrix):
        raise InvalidInputError('jointq refines uniform quantized matrices, got %r' % (type(Q0),))
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if W.shape != Q0.shape or X.ndim != 2 or X.shape[1] != W.shape[0]:
        raise InvalidInputError('inconsistent shapes X %r, W %r, Q %r' % (X.shape, W.shape, Q0.shape))

    search = _Search(Q0, W, regularized_gram(X, opts.lam))
    cfg = Q0.config
    f0 = search.objective()
    min_gain = 1e-12 * max(f0, np.finfo(float).tiny)
    trace = [f0]
    deltas = _deltas(opts.move_radius)
    N, M = W.shape
    accepted = 0
    passes = 0
    for passes in range(1, opts.max_passes + 1):
        moved = 0
        for i in range(N):
            for j in range(M):
                k, c = _group_of(i, j, search)
                start = search.bounds[k][0]
                col = j if search.per_tensor else 0
                for delta in deltas:
                    code = search.codes[i, j] + delta
                    if not cfg.q_min <= code <= cfg.q_max:
                        continue
                    cand = search.centered(k, c)
                    cand[i - start, col] += delta
                    gain, s = search.evaluate(k, c, cand)
                    if gain is not None and gain > min_gain:
                        search.codes[i, j] = code
                        search.apply(k, c, cand, s)
                        moved += 1
                        break
        if not cfg.symmetric:
            for k in range(len(search.bounds)):
                for c in range(search.scales.shape[1]):
                    for dz in (-1, 1):
                        z = search.zeros[k, c] + dz
                        if not cfg.q_min <= z <= cfg.q_max:
                            continue
                        cand = search.centered(k, c) - dz
                        gain, s = search.evaluate(k, c, cand)
                        if gain is not None and gain > min_gain:
                            search.zeros[k, c] = z
                            search.apply(k, c, cand, s)
                            moved += 1
                            break
        accepted += moved
        if not moved:
            break
        trace.append(search.objective())
        log.debug('jointq pass %d: %d moves, objective %g', passes, moved, trace[-1])
    return JointqResult(search.to_quantized(), trace, accepted, passes)
