# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Fidelity metrics between a full-precision and a quantized model.

Distillation losses are used as measurements only: KL divergence of the
next-token distributions, cosine distance of hidden states, the student's
entropy and held-out negative log-likelihood. The module also holds the
smooth rounding surrogate with its temperature schedule and the closed-form
low-rank residual fit.
"""

from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.linalg import cholesky, svd, solve_triangular, LinAlgError
from scipy.special import expit, log_softmax

from .log import InvalidInputError, NumericalError
from . import log

__all__ = [
    "kl_divergence", "hidden_alignment", "entropy", "nll", "perplexity", "cosine_distance",
    "smooth_ste", "psta_schedule", "lowrank_residual_fit", "lowrank_objective",
    "FidelityReport", "fidelity_report",
]


def _logits_pair(teacher_logits, student_logits):
    p = np.asarray(teacher_logits, dtype=np.float64)
    q = np.asarray(student_logits, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError('logit shapes differ: %r vs %r' % (p.shape, q.shape))
    if p.ndim == 1:
        p, q = p[None], q[None]
    return p.reshape(-1, p.shape[-1]), q.reshape(-1, q.shape[-1])


def kl_divergence(teacher_logits, student_logits, tau=1.0):
    """Mean over tokens of KL(p || q) at temperature tau."""
    if not tau > 0:
        raise InvalidInputError('temperature must be positive, got %r' % (tau,))
    p, q = _logits_pair(teacher_logits, student_logits)
    log_p = log_softmax(p / tau, axis=-1)
    log_q = log_softmax(q / tau, axis=-1)
    kl = np.sum(np.exp(log_p) * (log_p - log_q), axis=-1)
    return max(float(np.mean(kl)), 0.0)


def entropy(student_logits):
    """Mean entropy -sum q log q of the student distributions (non-negative)."""
    q = np.asarray(student_logits, dtype=np.float64)
    q = q.reshape(-1, q.shape[-1])
    log_q = log_softmax(q, axis=-1)
    return max(float(np.mean(-np.sum(np.exp(log_q) * log_q, axis=-1))), 0.0)


def nll(logits, tokens):
    """Teacher-forced next-token negative log-likelihood of one sequence."""
    logits = np.asarray(logits, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64).ravel()
    if logits.ndim != 2 or logits.shape[0] != tokens.size:
        raise InvalidInputError('logits of shape %r for %d tokens' % (logits.shape, tokens.size))
    if tokens.size < 2:
        raise InvalidInputError('next-token likelihood needs at least 2 tokens')
    log_q = log_softmax(logits[:-1], axis=-1)
    return float(-np.mean(log_q[np.arange(tokens.size - 1), tokens[1:]]))


def perplexity(model, sequences):
    """exp of the token-weighted mean NLL over held-out sequences."""
    total, count = 0.0, 0
    for seq in sequences:
        seq = np.asarray(seq)
        total += nll(model.forward(seq), seq) * (seq.size - 1)
        count += seq.size - 1
    if not count:
        raise InvalidInputError('no held-out tokens')
    return float(np.exp(total / count))


def cosine_distance(a, b):
    """1 - cos(a, b) of two flattened tensors, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError('tensor sizes differ: %d vs %d' % (a.size, b.size))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError('cosine distance of a zero-norm state')
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def _hidden(taps):
    return taps.hidden if hasattr(taps, 'hidden') else taps


def hidden_alignment(teacher_taps, student_taps):
    """Per-layer cosine distances of the hidden states and their mean.

    Each argument is a ForwardTaps, a list of per-layer states, or a list of
    either (one per sequence); states of all sequences are flattened per
    layer.
    """
    def per_layer(taps):
        if isinstance(taps, (list, tuple)) and taps and (
                hasattr(taps[0], 'hidden') or isinstance(taps[0], (list, tuple))):
            layers = [_hidden(t) for t in taps]
            return [np.concatenate([np.ravel(seq[l]) for seq in layers]) for l in range(len(layers[0]))]
        return [np.ravel(h) for h in _hidden(taps)]

    t_layers = per_layer(teacher_taps)
    s_layers = per_layer(student_taps)
    if len(t_layers) != len(s_layers) or not t_layers:
        raise InvalidInputError('expected matching non-empty layer lists, got %d and %d' % (
            len(t_layers), len(s_layers)))
    distances = [cosine_distance(t, s) for t, s in zip(t_layers, s_layers)]
    return distances, float(np.mean(distances))


def smooth_ste(x, k):
    """Smooth rounding floor(x) + sigmoid(k (frac(x) - 1/2)) and its derivative in x."""
    if not k > 0:
        raise InvalidInputError('sharpness k must be positive, got %r' % (k,))
    x = np.asarray(x, dtype=np.float64)
    fl = np.floor(x)
    sig = expit(k * (x - fl - 0.5))
    value = fl + sig
    deriv = k * sig * (1.0 - sig)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def psta_schedule(e, E, k_min=2.0, k_max=20.0):
    """Sharpness for epoch e of E, rising linearly from k_min to k_max."""
    if E < 2:
        raise InvalidInputError('the schedule needs at least 2 epochs, got %r' % (E,))
    if not 0 <= e < E:
        raise InvalidInputError('epoch %r outside [0, %d)' % (e, E))
    return k_min + (k_max - k_min) * e / float(E - 1)


def lowrank_objective(W, W_hat, gram):
    D = np.asarray(W, dtype=np.float64) - np.asarray(W_hat, dtype=np.float64)
    return max(float(np.sum(D * (gram @ D))), 0.0)


def lowrank_residual_fit(W, W_hat, X=None, r=1, gram=None):
    """Rank-r correction B A minimizing ||X (W_hat + B A - W)||_F^2.

    The residual W - W_hat is whitened by a (ridge-regularized) Cholesky
    factor of X^T X and truncated by SVD. Returns (B, A) of shapes (N, r)
    and (r, M); zero factors when the fit would not reduce the objective.
    Either X or its Gram matrix `gram` must be given.
    """
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape or W.ndim != 2:
        raise InvalidInputError('weights of shapes %r and %r' % (W.shape, W_hat.shape))
    N, M = W.shape
    if not 0 <= r <= min(N, M):
        raise InvalidInputError('rank %r outside [0, %d]' % (r, min(N, M)))
    if gram is None:
        if X is None:
            raise InvalidInputError('low-rank fit needs activations or their Gram matrix')
        X = np.asarray(X, dtype=np.float64)
        gram = X.T @ X
    gram = np.asarray(gram, dtype=np.float64)
    if gram.shape != (N, N):
        raise InvalidInputError('Gram of shape %r for %d inputs' % (gram.shape, N))
    B = np.zeros((N, r))
    A = np.zeros((r, M))
    if r == 0:
        return B, A
    ridge = 1e-8 * max(np.trace(gram) / N, np.finfo(float).tiny)
    try:
        L = cholesky(gram + ridge * np.eye(N), lower=False)
    except LinAlgError as e:
        raise NumericalError('activation Gram cannot be whitened: %s' % e)
    R = W - W_hat
    try:
        U, s, Vt = svd(L @ R, full_matrices=False)
    except (LinAlgError, ValueError) as e:
        raise NumericalError('SVD of the whitened residual failed: %s' % e)
    k = min(r, len(s))
    B[:, :k] = solve_triangular(L, U[:, :k] * s[:k], lower=False)
    A[:k] = Vt[:k]
    before = lowrank_objective(W, W_hat, gram)
    after = lowrank_objective(W, W_hat + B @ A, gram)
    if after > before:
        log.warning('low-rank fit did not reduce the objective (%g > %g); keeping no correction',
                    after, before)
        return np.zeros((N, r)), np.zeros((r, M))
    return B, A


@dataclass
class FidelityReport:
    kl: float
    hidden_cosine: list
    hidden_cosine_mean: float
    entropy: float
    nll: float = None
    teacher_nll: float = None
    layer_errors: dict = field(default_factory=OrderedDict)

    def to_dict(self):
        d = asdict(self)
        d['layer_errors'] = OrderedDict(self.layer_errors)
        return d

    def rows(self, stage):
        """(stage, metric, value) rows for the stage table."""
        out = [(stage, 'kl', self.kl), (stage, 'hidden_cosine', self.hidden_cosine_mean),
               (stage, 'entropy', self.entropy)]
        if self.nll is not None:
            out.append((stage, 'nll', self.nll))
        return out


def fidelity_report(teacher, student, sequences, heldout=None, tau=1.0, layer_errors=None):
    """Compare two models on calibration-style sequences.

    `heldout` sequences, when given, add the student's (and teacher's)
    mean next-token NLL.
    """
    sequences = [np.asarray(s) for s in sequences]
    if not sequences:
        raise InvalidInputError('fidelity report needs at least one sequence')
    t_taps = [teacher.forward_with_taps(s) for s in sequences]
    s_taps = [student.forward_with_taps(s) for s in sequences]
    t_logits = np.concatenate([t.logits for t in t_taps])
    s_logits = np.concatenate([t.logits for t in s_taps])
    distances, mean_distance = hidden_alignment(t_taps, s_taps)
    report = FidelityReport(
        kl=kl_divergence(t_logits, s_logits, tau),
        hidden_cosine=distances,
        hidden_cosine_mean=mean_distance,
        entropy=entropy(s_logits),
        layer_errors=OrderedDict(layer_errors or {}),
    )
    if heldout:
        report.nll = float(np.log(perplexity(student, heldout)))
        report.teacher_nll = float(np.log(perplexity(teacher, heldout)))
    return report
