# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Error-propagation correction of a layer's quantization target."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from ..log import InvalidInputError, NumericalError

__all__ = ["QepOptions", "qep_target"]


@dataclass(frozen=True)
class QepOptions:
    alpha: float = 1.0
    eta: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError('qep alpha must lie in [0, 1], got %r' % (self.alpha,))
        if not self.eta > 0:
            raise InvalidInputError('qep eta must be positive, got %r' % (self.eta,))


def qep_target(W, stats, opts=None):
    """Corrected target W* = (I + alpha (H + lambda I)^-1 C) W.

    H and C are the Gram and error-propagation matrices of `stats` and
    lambda = eta * mean(diag H). With alpha = 1 and small eta, W* is the
    least-squares weight reproducing the full-precision output from the
    perturbed inputs.
    """
    opts = opts or QepOptions()
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != stats.dim:
        raise InvalidInputError('weight of shape %r does not match statistics dimension %d' % (
            W.shape, stats.dim))
    if opts.alpha == 0 or not np.any(stats.cross):
        return W.copy()
    H = stats.gram
    lam = opts.eta * np.mean(np.diag(H))
    A = H + lam * np.eye(H.shape[0])
    try:
        correction = cho_solve(cho_factor(A), stats.cross @ W)
    except (LinAlgError, ValueError) as e:
        raise NumericalError('regularized Gram matrix is singular: %s' % e)
    if not np.all(np.isfinite(correction)):
        raise NumericalError('error-propagation correction is not finite')
    return W + opts.alpha * correction
