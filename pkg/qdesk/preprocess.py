# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Equivalence-preserving transforms applied before quantization.

All transforms act on the input axis of a linear ``Y = X W`` (or, for
balancing, on both axes) and come with the paired change of the
activations or of the surrounding computation, so the product is unchanged
before quantization.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, hadamard as sylvester_hadamard

from .log import InvalidInputError
from . import log

__all__ = [
    "ChannelScale", "Rotation", "RotationKind", "BalanceNorm", "smooth_scale",
    "smooth_scale_from_absmax", "apply_smooth", "apply_rotation", "rotate_activations",
    "random_orthogonal", "hadamard", "make_rotation", "incoherence", "sinkhorn_balance",
    "Preconditioner", "build_preconditioner",
]


ORTHOGONALITY_TOL = 1e-6


class RotationKind:
    "Collection of supported rotations."
    IDENTITY = "identity"
    RANDOM = "random_orthogonal"
    HADAMARD = "hadamard"

    ALL = (IDENTITY, RANDOM, HADAMARD)

    # Names accepted on the command line
    ALIASES = {"none": IDENTITY, "random": RANDOM, "hadamard": HADAMARD}

    @classmethod
    def resolve(cls, name):
        if name is None:
            return cls.IDENTITY
        name = cls.ALIASES.get(name, name)
        if name not in cls.ALL:
            raise InvalidInputError('unknown rotation %r, expected one of %r' % (
                name, sorted(cls.ALIASES)))
        return name


class BalanceNorm:
    "Vector norms usable for Sinkhorn balancing."
    L1 = "l1"
    L2 = "l2"

    ALL = (L1, L2)


@dataclass(frozen=True)
class ChannelScale:
    s: np.ndarray
    alpha: float

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise InvalidInputError('channel scales must be a positive finite vector')
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError('smoothing alpha must lie in [0, 1], got %r' % (self.alpha,))
        object.__setattr__(self, 's', s)


@dataclass(frozen=True)
class Rotation:
    R: np.ndarray
    kind: str = RotationKind.IDENTITY
    seed: int = 0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise InvalidInputError('rotation must be square, got shape %r' % (R.shape,))
        if np.max(np.abs(R @ R.T - np.eye(R.shape[0]))) > ORTHOGONALITY_TOL:
            raise InvalidInputError('rotation matrix is not orthogonal')
        if self.kind not in RotationKind.ALL:
            raise InvalidInputError('unknown rotation kind %r' % (self.kind,))
        object.__setattr__(self, 'R', R)

    @property
    def n(self):
        return self.R.shape[0]


def _absmax_rows(W):
    return np.abs(np.asarray(W, dtype=np.float64)).max(axis=1)


def smooth_scale_from_absmax(x_absmax, W, alpha=0.5):
    """Per-input-channel scales s_j = max|X_j|^alpha / max|W_j.|^(1 - alpha).

    Channels where either maximum is zero keep s_j = 1.
    """
    x_absmax = np.asarray(x_absmax, dtype=np.float64).ravel()
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or x_absmax.shape[0] != W.shape[0]:
        raise InvalidInputError('activation maxima of length %d for weight of shape %r' % (
            x_absmax.shape[0], W.shape))
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError('smoothing alpha must lie in [0, 1], got %r' % (alpha,))
    w_absmax = _absmax_rows(W)
    s = np.ones_like(x_absmax)
    live = (x_absmax > 0) & (w_absmax > 0)
    s[live] = x_absmax[live] ** alpha / w_absmax[live] ** (1.0 - alpha)
    return ChannelScale(s, alpha)


def smooth_scale(X, W, alpha=0.5):
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0]:
        raise InvalidInputError('activations %r do not match weight %r' % (X.shape, W.shape))
    return smooth_scale_from_absmax(np.abs(X).max(axis=0), W, alpha)


def apply_smooth(X, W, scale):
    """Migrate difficulty: returns (X diag(s)^-1, diag(s) W)."""
    s = scale.s if isinstance(scale, ChannelScale) else np.asarray(scale, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.shape[-1] != s.shape[0] or W.shape[0] != s.shape[0]:
        raise InvalidInputError('channel scale of length %d does not match %r/%r' % (
            s.shape[0], X.shape, W.shape))
    return X / s, s[:, None] * W


def _as_rotation(R):
    return R if isinstance(R, Rotation) else Rotation(R)


def apply_rotation(W, R, side='input'):
    """Rotate a weight on its input side (R^T W) or output side (W R).

    The paired activation change for the input side is X -> X R, see
    `rotate_activations`.
    """
    rot = _as_rotation(R)
    W = np.asarray(W, dtype=np.float64)
    if side == 'input':
        if W.shape[0] != rot.n:
            raise InvalidInputError('rotation of size %d for %d inputs' % (rot.n, W.shape[0]))
        return rot.R.T @ W
    if side == 'output':
        if W.shape[1] != rot.n:
            raise InvalidInputError('rotation of size %d for %d outputs' % (rot.n, W.shape[1]))
        return W @ rot.R
    raise InvalidInputError("rotation side must be 'input' or 'output', got %r" % (side,))


def rotate_activations(X, R):
    rot = _as_rotation(R)
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != rot.n:
        raise InvalidInputError('rotation of size %d for activations of width %d' % (rot.n, X.shape[-1]))
    return X @ rot.R


def random_orthogonal(n, seed=0):
    """Seeded Haar-like orthogonal matrix: QR of a Gaussian with sign-fixed diagonal."""
    if n < 1:
        raise InvalidInputError('rotation size must be positive')
    A = np.random.default_rng(seed).standard_normal((n, n))
    Q, R = qr(A)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


def hadamard(n):
    """Normalized Sylvester Hadamard matrix, n a power of two."""
    if n < 1 or n & (n - 1):
        raise InvalidInputError('Hadamard rotation needs a power-of-two size, got %d' % n)
    return sylvester_hadamard(n).astype(np.float64) / np.sqrt(n)


def make_rotation(kind, n, seed=0):
    kind = RotationKind.resolve(kind)
    if kind == RotationKind.IDENTITY:
        return Rotation(np.eye(n), kind, seed)
    if kind == RotationKind.RANDOM:
        return Rotation(random_orthogonal(n, seed), kind, seed)
    return Rotation(hadamard(n), kind, seed)


def incoherence(W):
    """mu = max|W_ij| sqrt(N M) / ||W||_F, at least 1."""
    W = np.asarray(W, dtype=np.float64)
    norm = np.linalg.norm(W)
    if W.ndim != 2 or norm == 0:
        raise InvalidInputError('incoherence is undefined for an empty or zero matrix')
    return float(np.abs(W).max() * np.sqrt(W.size) / norm)


def _norms(W, axis, norm):
    if norm == BalanceNorm.L1:
        return np.abs(W).sum(axis=axis)
    return np.sqrt((W * W).sum(axis=axis))


def _spread(n):
    live = n[n > 0]
    if live.size == 0:
        return 0.0
    return float(live.max() / live.min() - 1.0)


def _balance_step(n):
    """Factors bringing the non-zero norms to their geometric mean."""
    f = np.ones_like(n)
    live = n > 0
    if np.any(live):
        f[live] = n[live] / np.exp(np.mean(np.log(n[live])))
    return f


def sinkhorn_balance(W, norm=BalanceNorm.L2, iters=50, tol=1e-3, strict=False):
    """Alternately rescale rows and columns to equal norms.

    Returns (W_bal, row_scale, col_scale) with
    W = diag(row_scale) W_bal diag(col_scale). All-zero rows or columns
    keep scale 1. Non-convergence within `iters` is logged with the achieved
    spread, or raised when `strict`.
    """
    if norm not in BalanceNorm.ALL:
        raise InvalidInputError('unknown balance norm %r, expected one of %r' % (norm, BalanceNorm.ALL))
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise InvalidInputError('balancing needs a non-empty 2-D matrix')
    if not np.all(np.isfinite(W)):
        raise InvalidInputError('balancing needs finite entries')
    W_bal = W.copy()
    row = np.ones(W.shape[0])
    col = np.ones(W.shape[1])
    spread = np.inf
    for it in range(iters):
        f = _balance_step(_norms(W_bal, 1, norm))
        W_bal /= f[:, None]
        row *= f
        g = _balance_step(_norms(W_bal, 0, norm))
        W_bal /= g[None, :]
        col *= g
        spread = max(_spread(_norms(W_bal, 1, norm)), _spread(_norms(W_bal, 0, norm)))
        if spread <= tol:
            break
    if spread > tol:
        msg = 'sinkhorn balancing did not converge in %d iterations (spread %.3g > %.3g)' % (
            iters, spread, tol)
        if strict:
            raise InvalidInputError(msg)
        log.warning(msg)
    return W_bal, row, col


class Preconditioner(object):
    """Composition of smoothing, input rotation and balancing for one layer.

    With K = diag(pre) R diag(row), the layer weight factors as
    W = K W_bal diag(col); the quantized layer's effective weight is
    K deq(Q) diag(col). Rotations are stored by kind and seed and are
    regenerated on load.
    """

    def __init__(self, n, m, pre=None, rotation=RotationKind.IDENTITY, seed=0, row=None, col=None):
        self.n = n
        self.m = m
        self.pre = np.ones(n) if pre is None else np.asarray(pre, dtype=np.float64)
        self.rotation = make_rotation(rotation, n, seed)
        self.row = np.ones(n) if row is None else np.asarray(row, dtype=np.float64)
        self.col = np.ones(m) if col is None else np.asarray(col, dtype=np.float64)
        if self.pre.shape != (n,) or self.row.shape != (n,) or self.col.shape != (m,):
            raise InvalidInputError('preconditioner vectors do not match a %dx%d weight' % (n, m))
        if not all(np.all(np.isfinite(v)) and np.all(v > 0) for v in (self.pre, self.row, self.col)):
            raise InvalidInputError('preconditioner scales must be positive and finite')

    @property
    def is_identity(self):
        return (self.rotation.kind == RotationKind.IDENTITY and
                np.all(self.pre == 1) and np.all(self.row == 1) and np.all(self.col == 1))

    def input_map(self):
        "K = diag(pre) R diag(row)."
        return (self.pre[:, None] * self.rotation.R) * self.row[None, :]

    def apply_weight(self, W):
        """W_bal = K^-1 W diag(col)^-1."""
        W = np.asarray(W, dtype=np.float64)
        V = self.rotation.R.T @ (W / self.pre[:, None])
        return V / self.row[:, None] / self.col[None, :]

    def effective(self, W_q):
        """Weight in the original basis for a quantized W_bal."""
        return self.input_map() @ (np.asarray(W_q, dtype=np.float64) * self.col[None, :])

    def transform_stats(self, stats):
        if self.is_identity:
            return stats
        return stats.transformed(self.input_map())

    def transform_activations(self, X):
        return np.asarray(X, dtype=np.float64) @ self.input_map()

    def to_dict(self):
        return dict(
            rotation=self.rotation.kind,
            seed=int(self.rotation.seed),
            pre=[float(x) for x in self.pre],
            row=[float(x) for x in self.row],
            col=[float(x) for x in self.col],
        )

    @classmethod
    def from_dict(cls, d, n, m):
        return cls(n, m, pre=d.get('pre'), rotation=d.get('rotation', RotationKind.IDENTITY),
                   seed=d.get('seed', 0), row=d.get('row'), col=d.get('col'))


def build_preconditioner(W, stats=None, smooth_alpha=None, rotation=None, balance=None, seed=0,
                         balance_iters=50, balance_tol=1e-3):
    """Fit a preconditioner for W from its calibration statistics.

    `smooth_alpha` None disables smoothing (which needs `stats.act_absmax`),
    `rotation` takes 'none', 'random' or 'hadamard' and `balance` 'l1', 'l2'
    or None.
    """
    W = np.asarray(W, dtype=np.float64)
    n, m = W.shape
    pre = np.ones(n)
    if smooth_alpha is not None:
        if stats is None:
            raise InvalidInputError('smoothing needs calibration statistics')
        pre = 1.0 / smooth_scale_from_absmax(stats.act_absmax, W, smooth_alpha).s
    precond = Preconditioner(n, m, pre=pre, rotation=RotationKind.resolve(rotation), seed=seed)
    if balance not in (None, 'none'):
        W_bal, row, col = sinkhorn_balance(precond.apply_weight(W), balance, balance_iters, balance_tol)
        precond = Preconditioner(n, m, pre=pre, rotation=precond.rotation.kind, seed=seed,
                                 row=row, col=col)
    return precond
