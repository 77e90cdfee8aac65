# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Relax-then-project coordinate descent over coupled linear layers.

A submodule groups the layers of one block whose outputs interact: the
query/key pair through attention scores, the value/output pair through the
attention output and the three feed-forward layers through the gated
product. Each step relaxes one member to its continuous optimum with the
others held at their quantized values, then projects it back onto the
quantization format.
"""

from collections import namedtuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import expit

from ..log import InvalidInputError
from .. import log
from ..quant_format import dequantize
from ..toymodel import rope, rope_matrices, layer_id
from .qep import QepOptions, qep_target
from .rtn import ScaleMode, quantize_matrix

__all__ = [
    "SubmoduleKind", "Submodule", "LpcdStep", "LpcdReport", "lpcd_refine",
    "submodule_objective", "relax_member", "gate_objective", "uniform_projector",
]


# Ridge added to every normal-equation solve, relative to the mean diagonal
RIDGE = 1e-8

GATE_STEPS = 200
GATE_LR = 1e-2


class SubmoduleKind:
    "Collection of coupled-layer groupings."
    QK = "qk"
    VO = "vo"
    GATE_UP_DOWN = "gate_up_down"
    LINEAR = "linear"

    ALL = (QK, VO, GATE_UP_DOWN, LINEAR)

    ROLES = {
        QK: ('q', 'k'),
        VO: ('v', 'o'),
        GATE_UP_DOWN: ('up', 'gate', 'down'),
    }


class Submodule(object):
    """Cached data for the objective J of one coupled layer group.

    `weights` holds full-precision member weights, `quantized` the current
    dequantized members and `payloads` whatever the projector produced for
    them. `x_fp`/`x_q` are per-sequence inputs of the full-precision and
    quantized models.
    """

    def __init__(self, kind, block, members, weights, quantized, payloads=None,
                 x_fp=None, x_q=None, probs=None, config=None, stats=None, eta=0.01):
        if kind not in SubmoduleKind.ALL:
            raise InvalidInputError('unknown submodule kind %r' % (kind,))
        self.kind = kind
        self.block = block
        self.members = tuple(members)
        self.weights = {k: np.asarray(weights[k], dtype=np.float64) for k in self.members}
        self.quantized = {k: np.asarray(quantized[k], dtype=np.float64) for k in self.members}
        self.payloads = dict(payloads or {})
        self.x_fp = x_fp
        self.x_q = x_q
        self.probs = probs
        self.config = config
        self.stats = stats
        self.eta = eta
        self._targets = None
        if kind != SubmoduleKind.LINEAR:
            if config is None or x_fp is None or x_q is None:
                raise InvalidInputError('%s submodules need model config and cached inputs' % kind)
            if kind == SubmoduleKind.VO and probs is None:
                raise InvalidInputError('vo submodules need full-precision attention probabilities')
            self._targets = [self._output(x, self.weights, i) for i, x in enumerate(self.x_fp)]

    @classmethod
    def linear(cls, name, W, stats, W_hat, payload=None, eta=0.01):
        """Single layer with J = ||X_hat U - X W||^2."""
        return cls(SubmoduleKind.LINEAR, None, (name,), {name: W}, {name: W_hat},
                   {name: payload}, stats=stats, eta=eta)

    @classmethod
    def from_taps(cls, kind, block, fp_taps, q_taps, fp_weights, quantized, payloads, config):
        """Build a block submodule from forward taps of both models."""
        if kind not in SubmoduleKind.ROLES:
            raise InvalidInputError('%r is not a block submodule kind' % (kind,))
        members = [layer_id(block, role) for role in SubmoduleKind.ROLES[kind]]
        first = members[0]
        x_fp = [t.inputs[first] for t in fp_taps]
        x_q = [t.inputs[first] for t in q_taps]
        probs = [t.attn_probs[block] for t in fp_taps] if kind == SubmoduleKind.VO else None
        return cls(kind, block, members, fp_weights, quantized, payloads,
                   x_fp=x_fp, x_q=x_q, probs=probs, config=config)

    def role(self, name):
        return name.split('.')[-1]

    def by_role(self, current):
        return {self.role(k): v for k, v in current.items() if k in self.members}

    def _output(self, x, weights, i):
        """The quantity J compares, for one sequence."""
        w = self.by_role(weights)
        if self.kind == SubmoduleKind.QK:
            return _causal_scores(x, w['q'], w['k'], self.config)
        if self.kind == SubmoduleKind.VO:
            return _head_outputs(x, w['v'], self.probs[i], self.config) @ w['o']
        return (_silu(x @ w['gate']) * (x @ w['up'])) @ w['down']


def _silu(z):
    return z * expit(z)


def _causal_scores(x, Wq, Wk, cfg):
    "Pre-softmax scaled scores at causal positions, shape (H, T(T+1)/2)."
    T = x.shape[0]
    q = rope((x @ Wq).reshape(T, cfg.H, cfg.d_k), cfg.rope_base)
    k = rope((x @ Wk).reshape(T, cfg.H_kv, cfg.d_k), cfg.rope_base)
    k = k[:, [cfg.kv_head(h) for h in range(cfg.H)]]
    scores = np.einsum('thd,shd->hts', q, k) / np.sqrt(cfg.d_k)
    ti, si = np.tril_indices(T)
    return scores[:, ti, si]


def _head_outputs(x, Wv, probs, cfg):
    "Concatenated head outputs P_h x W_v for fixed probabilities, shape (T, d)."
    T = x.shape[0]
    v = (x @ Wv).reshape(T, cfg.H_kv, cfg.d_k)
    v = v[:, [cfg.kv_head(h) for h in range(cfg.H)]]
    return np.einsum('hts,shd->thd', probs, v).reshape(T, cfg.H * cfg.d_k)


def submodule_objective(sub, current):
    """J for the current member weights (dict layer id -> dense weight)."""
    weights = dict(sub.quantized)
    weights.update({k: np.asarray(v, dtype=np.float64) for k, v in current.items()})
    if sub.kind == SubmoduleKind.LINEAR:
        name = sub.members[0]
        return sub.stats.objective(sub.weights[name], weights[name])
    J = 0.0
    for i, (x, target) in enumerate(zip(sub.x_q, sub._targets)):
        J += float(np.sum((sub._output(x, weights, i) - target) ** 2))
    return J


def _ridge_solve(A, rhs):
    """Solve (A + ridge I) u = rhs; also report whether A itself is rank deficient."""
    n = A.shape[0]
    rank_deficient = False
    try:
        c, _ = cho_factor(A)
        d = np.abs(np.diag(c))
        rank_deficient = d.min() <= 1e-7 * d.max()
    except LinAlgError:
        rank_deficient = True
    mean_diag = np.trace(A) / n
    lam = RIDGE * mean_diag if mean_diag > 0 else RIDGE
    return cho_solve(cho_factor(A + lam * np.eye(n)), rhs), rank_deficient


def _relax_q(sub, w):
    cfg = sub.config
    d_k = cfg.d_k
    N = w['q'].shape[0]
    U = np.empty_like(w['q'])
    deficient = False
    for h in range(cfg.H):
        A = np.zeros((N * d_k, N * d_k))
        rhs = np.zeros(N * d_k)
        for x, target in zip(sub.x_q, sub._targets):
            T = x.shape[0]
            R = rope_matrices(T, d_k, cfg.rope_base)
            k = rope((x @ w['k']).reshape(T, cfg.H_kv, d_k), cfg.rope_base)[:, cfg.kv_head(h)]
            Z = np.einsum('tab,sb->tsa', R, k) / np.sqrt(d_k)
            ti, si = np.tril_indices(T)
            D = (x[ti][:, :, None] * Z[ti, si][:, None, :]).reshape(len(ti), N * d_k)
            A += D.T @ D
            rhs += D.T @ target[h]
        u, flag = _ridge_solve(A, rhs)
        U[:, h * d_k:(h + 1) * d_k] = u.reshape(N, d_k)
        deficient |= flag
    return U, deficient


def _relax_k(sub, w):
    cfg = sub.config
    d_k = cfg.d_k
    N = w['k'].shape[0]
    U = np.empty_like(w['k'])
    deficient = False
    for j in range(cfg.H_kv):
        A = np.zeros((N * d_k, N * d_k))
        rhs = np.zeros(N * d_k)
        for x, target in zip(sub.x_q, sub._targets):
            T = x.shape[0]
            R = rope_matrices(T, d_k, cfg.rope_base)
            q = rope((x @ w['q']).reshape(T, cfg.H, d_k), cfg.rope_base)
            ti, si = np.tril_indices(T)
            for h in range(cfg.H):
                if cfg.kv_head(h) != j:
                    continue
                Z = np.einsum('sab,tb->tsa', R, q[:, h]) / np.sqrt(d_k)
                D = (x[si][:, :, None] * Z[ti, si][:, None, :]).reshape(len(ti), N * d_k)
                A += D.T @ D
                rhs += D.T @ target[h]
        u, flag = _ridge_solve(A, rhs)
        U[:, j * d_k:(j + 1) * d_k] = u.reshape(N, d_k)
        deficient |= flag
    return U, deficient


def _relax_o(sub, w):
    d = w['o'].shape[0]
    A = np.zeros((d, d))
    rhs = np.zeros_like(w['o'])
    for i, (x, target) in enumerate(zip(sub.x_q, sub._targets)):
        heads = _head_outputs(x, w['v'], sub.probs[i], sub.config)
        A += heads.T @ heads
        rhs += heads.T @ target
    return _ridge_solve(A, rhs)


def _relax_v(sub, w):
    cfg = sub.config
    d_k, H_kv = cfg.d_k, cfg.H_kv
    N = w['v'].shape[0]
    n = N * H_kv * d_k
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    for i, (x, target) in enumerate(zip(sub.x_q, sub._targets)):
        T = x.shape[0]
        d_out = target.shape[1]
        D = np.zeros((T, d_out, N, H_kv, d_k))
        for h in range(cfg.H):
            Y = sub.probs[i][h] @ x
            O_h = w['o'][h * d_k:(h + 1) * d_k]
            D[:, :, :, cfg.kv_head(h), :] += np.einsum('ta,bc->tcab', Y, O_h)
        D = D.reshape(T * d_out, n)
        A += D.T @ D
        rhs += D.T @ target.reshape(-1)
    u, flag = _ridge_solve(A, rhs)
    return u.reshape(N, H_kv * d_k), flag


def _stacked(sub):
    return np.concatenate(sub.x_q, axis=0), np.concatenate(sub._targets, axis=0)


def _relax_up(sub, w):
    x, F = _stacked(sub)
    N, d_ff = w['up'].shape
    G = _silu(x @ w['gate'])
    D = w['down']
    Z = (x[:, :, None] * G[:, None, :]).reshape(x.shape[0], N * d_ff)
    A = (Z.T @ Z).reshape(N, d_ff, N, d_ff) * (D @ D.T)[None, :, None, :]
    rhs = x.T @ (G * (F @ D.T))
    u, flag = _ridge_solve(A.reshape(N * d_ff, N * d_ff), rhs.reshape(-1))
    return u.reshape(N, d_ff), flag


def _relax_down(sub, w):
    x, F = _stacked(sub)
    M = _silu(x @ w['gate']) * (x @ w['up'])
    return _ridge_solve(M.T @ M, M.T @ F)


def gate_objective(U, x, up_out, D, F):
    """Value and gradient of ||(silu(x U) * up_out) D - F||^2 with respect to U."""
    Z = x @ U
    s = expit(Z)
    R = (Z * s * up_out) @ D - F
    dZ = 2.0 * (R @ D.T) * up_out * s * (1.0 + Z * (1.0 - s))
    return float(np.sum(R * R)), x.T @ dZ


def _relax_gate(sub, w):
    x, F = _stacked(sub)
    up_out = x @ w['up']
    U = w['gate'].copy()
    f, g = gate_objective(U, x, up_out, w['down'], F)
    lr = GATE_LR
    for _ in range(GATE_STEPS):
        trial = U - lr * g
        f_trial, g_trial = gate_objective(trial, x, up_out, w['down'], F)
        if f_trial < f:
            U, f, g = trial, f_trial, g_trial
        else:
            lr *= 0.5
            if lr < 1e-14:
                break
    return U, False


_RELAX = {
    'q': _relax_q, 'k': _relax_k, 'v': _relax_v, 'o': _relax_o,
    'up': _relax_up, 'gate': _relax_gate, 'down': _relax_down,
}


def relax_member(sub, member, current):
    """Continuous minimizer of J over one member, others fixed.

    Returns (weight, rank_deficient).
    """
    if member not in sub.members:
        raise InvalidInputError('%r is not a member of this submodule' % (member,))
    if sub.kind == SubmoduleKind.LINEAR:
        return qep_target(sub.weights[member], sub.stats, QepOptions(1.0, sub.eta)), False
    weights = dict(sub.quantized)
    weights.update(current)
    return _RELAX[sub.role(member)](sub, sub.by_role(weights))


LpcdStep = namedtuple('LpcdStep', (
    'iteration', 'member', 'J_before', 'J_relaxed', 'J_projected', 'rank_deficient'))


class LpcdReport(object):

    def __init__(self, kind, block, J_init):
        self.kind = kind
        self.block = block
        self.J_init = J_init
        self.J_final = J_init
        self.steps = []

    @property
    def rank_deficient(self):
        return any(s.rank_deficient for s in self.steps)

    def to_dict(self):
        return dict(kind=self.kind, block=self.block, J_init=self.J_init, J_final=self.J_final,
                    steps=[s._asdict() for s in self.steps])


def lpcd_refine(sub, projector, iters=3, keep_best=True):
    """Cyclic relax-then-project over the members of `sub`.

    `projector(layer_id, W)` returns (dequantized weight, payload). Returns
    (payloads, dequantized weights, report). With `keep_best` the best
    projected state seen, initialization included, is returned.
    """
    current = dict(sub.quantized)
    payloads = dict(sub.payloads)
    J = submodule_objective(sub, current)
    report = LpcdReport(sub.kind, sub.block, J)
    best = (J, dict(current), dict(payloads))
    for it in range(iters):
        for member in sub.members:
            J_before = J
            relaxed, deficient = relax_member(sub, member, current)
            trial = dict(current)
            trial[member] = relaxed
            J_relaxed = submodule_objective(sub, trial)
            W_hat, payload = projector(member, relaxed)
            current[member] = np.asarray(W_hat, dtype=np.float64)
            payloads[member] = payload
            J = submodule_objective(sub, current)
            if deficient:
                log.warning('lpcd: rank-deficient relaxation for %s, used ridge solve', member)
            report.steps.append(LpcdStep(it, member, J_before, J_relaxed, J, deficient))
        log.debug('lpcd %s block %s iteration %d: J=%g', sub.kind, sub.block, it, J)
        if J < best[0]:
            best = (J, dict(current), dict(payloads))
    if keep_best:
        J, current, payloads = best
    report.J_final = J
    return payloads, current, report


def uniform_projector(configs, scale_mode=ScaleMode.MINMAX):
    """Round-to-nearest projection onto per-layer uniform configs.

    `configs` is one QuantConfig or a dict layer id -> QuantConfig.
    """
    def project(name, W):
        cfg = configs[name] if isinstance(configs, dict) else configs
        Q = quantize_matrix(W, cfg, scale_mode)
        return dequantize(Q).astype(np.float64), Q
    return project
