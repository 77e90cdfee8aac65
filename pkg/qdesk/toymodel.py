# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""A small LLaMA-style decoder used as the quantization target.

Linear modules follow the ``Y = X W`` convention, so every weight has shape
(input features, output features). The output head is tied to the
transposed embedding and is never quantized.
"""

from collections import namedtuple
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit, softmax

from .log import InvalidInputError


ROLES = ('q', 'k', 'v', 'o', 'gate', 'up', 'down')


@dataclass(frozen=True)
class ToyModelConfig:
    L: int = 2
    d: int = 32
    H: int = 4
    H_kv: int = 2
    d_ff: int = 64
    vocab: int = 256
    T_max: int = 128
    rope_base: float = 10000.0
    rms_eps: float = 1e-5

    def __post_init__(self):
        for name in ('L', 'd', 'H', 'H_kv', 'd_ff', 'vocab', 'T_max'):
            if getattr(self, name) < 1:
                raise InvalidInputError('model config %s must be positive' % name)
        if self.d % self.H:
            raise InvalidInputError('hidden size %d is not divisible by %d heads' % (self.d, self.H))
        if self.H % self.H_kv:
            raise InvalidInputError('%d kv heads do not divide %d query heads' % (self.H_kv, self.H))
        if self.d_k % 2:
            raise InvalidInputError('head size must be even for rotary embeddings')
        if not (self.rope_base > 0 and self.rms_eps > 0):
            raise InvalidInputError('rope_base and rms_eps must be positive')

    @property
    def d_k(self):
        return self.d // self.H

    @property
    def kv_dim(self):
        return self.H_kv * self.d_k

    def kv_head(self, h):
        "The key/value head shared by query head h."
        return h // (self.H // self.H_kv)

    def linear_shape(self, role):
        d, kv, ff = self.d, self.kv_dim, self.d_ff
        return {
            'q': (d, d), 'k': (d, kv), 'v': (d, kv), 'o': (d, d),
            'gate': (d, ff), 'up': (d, ff), 'down': (ff, d),
        }[role]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layer_id(block, role):
    return 'blocks.%d.%s' % (block, role)


def parse_layer_id(name):
    "Split 'blocks.{i}.{role}' into (i, role)."
    parts = name.split('.')
    if len(parts) != 3 or parts[0] != 'blocks' or parts[2] not in ROLES:
        raise InvalidInputError('not a linear layer id: %r' % (name,))
    try:
        return int(parts[1]), parts[2]
    except ValueError:
        raise InvalidInputError('not a linear layer id: %r' % (name,))


LayerNode = namedtuple('LayerNode', ('layer_id', 'role', 'block', 'shape'))


class LayerGraph(object):
    """Quantizable linear modules in forward execution order."""

    def __init__(self, config):
        self.config = config
        self.nodes = [LayerNode(layer_id(i, role), role, i, config.linear_shape(role))
                      for i in range(config.L) for role in ROLES]
        self._index = {n.layer_id: n for n in self.nodes}

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise InvalidInputError('unknown layer id %r' % (name,))

    def ids(self):
        return [n.layer_id for n in self.nodes]

    def block(self, i):
        return [n for n in self.nodes if n.block == i]

    def parameter_count(self):
        return sum(n.shape[0] * n.shape[1] for n in self.nodes)


def rmsnorm(x, gain, eps=1e-5):
    """RMS normalization along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise InvalidInputError('rmsnorm gain of width %d for input width %d' % (
            gain.shape[-1], x.shape[-1]))
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def _rope_angles(T, d_k, base):
    half = d_k // 2
    inv_freq = base ** (-np.arange(half) * 2.0 / d_k)
    return np.arange(T)[:, None] * inv_freq[None, :]


def rope(x, base=10000.0):
    """Rotary embedding of x with shape (T, d_k) or (T, heads, d_k).

    Pairs are (i, i + d_k/2); position t rotates pair i by t * base^(-2i/d_k).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-1] % 2:
        raise InvalidInputError('rope expects (T, d_k) or (T, heads, d_k) with even d_k, got %r' % (
            x.shape,))
    T, d_k = x.shape[0], x.shape[-1]
    half = d_k // 2
    ang = _rope_angles(T, d_k, base)
    if x.ndim == 3:
        ang = ang[:, None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def rope_matrices(T, d_k, base=10000.0):
    """Per-position rotations R_t with rope(x)[t] = x[t] @ R_t, shape (T, d_k, d_k)."""
    half = d_k // 2
    ang = _rope_angles(T, d_k, base)
    cos, sin = np.cos(ang), np.sin(ang)
    R = np.zeros((T, d_k, d_k))
    i = np.arange(half)
    R[:, i, i] = cos
    R[:, i + half, i + half] = cos
    R[:, i, i + half] = sin
    R[:, i + half, i] = -sin
    return R


def causal_mask(T):
    mask = np.zeros((T, T))
    mask[np.triu_indices(T, 1)] = -np.inf
    return mask


ForwardTaps = namedtuple('ForwardTaps', (
    'logits',        # (T, vocab)
    'hidden',        # L residual states after each block, (T, d)
    'inputs',        # layer id -> (T, N) input of that linear module
    'block_inputs',  # L residual states entering each block
    'attn_probs',    # L arrays (H, T, T) of causal attention probabilities
))


def dense_names(config):
    "Names of the tensors that are never quantized."
    names = ['embedding']
    for i in range(config.L):
        names += ['norm.%d.attn' % i, 'norm.%d.ffn' % i]
    return names + ['final_norm']


class ToyModel(object):
    """Decoder weights plus the forward pass.

    Weights are held as float32 arrays keyed by canonical tensor names;
    the forward pass runs in float64.
    """

    def __init__(self, config, weights):
        self.config = config
        self.graph = LayerGraph(config)
        expected = {name: self._expected_shape(name) for name in self.tensor_names()}
        missing = [name for name in expected if name not in weights]
        if missing:
            raise InvalidInputError('model is missing tensors: %s' % ', '.join(missing))
        unknown = [name for name in weights if name not in expected]
        if unknown:
            raise InvalidInputError('unknown model tensors: %s' % ', '.join(sorted(unknown)))
        self.weights = {}
        for name, shape in expected.items():
            w = np.asarray(weights[name], dtype=np.float32)
            if w.shape != shape:
                raise InvalidInputError('tensor %s has shape %r, expected %r' % (name, w.shape, shape))
            if not np.all(np.isfinite(w)):
                raise InvalidInputError('tensor %s has non-finite entries' % name)
            self.weights[name] = w

    @classmethod
    def init(cls, config=None, seed=0):
        """Seeded Gaussian weights scaled by 1/sqrt(d), unit norm gains."""
        config = config or ToyModelConfig()
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(config.d)
        weights = {'embedding': rng.normal(0.0, std, (config.vocab, config.d))}
        for node in LayerGraph(config):
            weights[node.layer_id] = rng.normal(0.0, std, node.shape)
        for name in dense_names(config)[1:]:
            weights[name] = np.ones(config.d)
        return cls(config, weights)

    def tensor_names(self):
        names = dense_names(self.config)
        return names[:-1] + self.graph.ids() + names[-1:]

    def _expected_shape(self, name):
        if name == 'embedding':
            return (self.config.vocab, self.config.d)
        if name.startswith('norm.') or name == 'final_norm':
            return (self.config.d,)
        block, role = parse_layer_id(name)
        if block >= self.config.L:
            raise InvalidInputError('layer %r is beyond the %d blocks of the model' % (
                name, self.config.L))
        return self.config.linear_shape(role)

    def linear_names(self):
        return self.graph.ids()

    def weight(self, name):
        return self.weights[name]

    def parameter_count(self):
        return sum(w.size for w in self.weights.values())

    def copy(self):
        return ToyModel(self.config, {k: v.copy() for k, v in self.weights.items()})

    def with_weights(self, updates):
        """A new model with some tensors replaced."""
        weights = dict(self.weights)
        weights.update(updates)
        return ToyModel(self.config, weights)

    def set_weight(self, name, W):
        """Install a weight in place (callers need exclusive access)."""
        W = np.asarray(W, dtype=np.float32)
        if W.shape != self.weights[name].shape:
            raise InvalidInputError('tensor %s has shape %r, expected %r' % (
                name, W.shape, self.weights[name].shape))
        self.weights[name] = W

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        if tokens.size == 0:
            raise InvalidInputError('empty token sequence')
        if tokens.size > self.config.T_max:
            raise InvalidInputError('sequence of %d tokens exceeds T_max=%d' % (
                tokens.size, self.config.T_max))
        if tokens.min() < 0 or tokens.max() >= self.config.vocab:
            raise InvalidInputError('token ids must lie in [0, %d)' % self.config.vocab)
        return tokens

    def _w(self, name):
        return self.weights[name].astype(np.float64)

    def attention(self, x, block):
        """Attention sublayer on normalized input x: (output, head outputs, probs)."""
        cfg = self.config
        T = x.shape[0]
        d_k = cfg.d_k
        q = (x @ self._w(layer_id(block, 'q'))).reshape(T, cfg.H, d_k)
        k = (x @ self._w(layer_id(block, 'k'))).reshape(T, cfg.H_kv, d_k)
        v = (x @ self._w(layer_id(block, 'v'))).reshape(T, cfg.H_kv, d_k)
        q = rope(q, cfg.rope_base)
        k = rope(k, cfg.rope_base)
        kv_map = [cfg.kv_head(h) for h in range(cfg.H)]
        k, v = k[:, kv_map], v[:, kv_map]
        scores = np.einsum('thd,shd->hts', q, k) / np.sqrt(d_k) + causal_mask(T)
        probs = softmax(scores, axis=-1)
        heads = np.einsum('hts,shd->thd', probs, v).reshape(T, cfg.d)
        return heads @ self._w(layer_id(block, 'o')), heads, probs

    def forward_with_taps(self, tokens):
        cfg = self.config
        tokens = self._check_tokens(tokens)
        x = self._w('embedding')[tokens]
        hidden, block_inputs, probs_all = [], [], []
        inputs = {}
        for i in range(cfg.L):
            block_inputs.append(x)
            a = rmsnorm(x, self._w('norm.%d.attn' % i), cfg.rms_eps)
            for role in ('q', 'k', 'v'):
                inputs[layer_id(i, role)] = a
            attn, heads, probs = self.attention(a, i)
            inputs[layer_id(i, 'o')] = heads
            probs_all.append(probs)
            x = x + attn

            f = rmsnorm(x, self._w('norm.%d.ffn' % i), cfg.rms_eps)
            inputs[layer_id(i, 'gate')] = f
            inputs[layer_id(i, 'up')] = f
            m = silu(f @ self._w(layer_id(i, 'gate'))) * (f @ self._w(layer_id(i, 'up')))
            inputs[layer_id(i, 'down')] = m
            x = x + m @ self._w(layer_id(i, 'down'))
            hidden.append(x)
        logits = rmsnorm(x, self._w('final_norm'), cfg.rms_eps) @ self._w('embedding').T
        return ForwardTaps(logits, hidden, inputs, block_inputs, probs_all)

    def forward(self, tokens):
        return self.forward_with_taps(tokens).logits
