# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Calibration token sets and per-layer activation statistics."""

import json
from dataclasses import dataclass

import numpy as np

from .log import InvalidInputError, ContainerError
from . import log

__all__ = [
    "CalibStats", "accumulate_stats", "TokenCorpus", "CalibSet", "Strategy",
    "XorShift64Star", "sample_calib", "collect_layer_inputs", "read_corpus",
    "synthetic_corpus", "write_calib_set", "read_calib_set",
]


_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class CalibStats:
    """Streaming statistics of one linear module's inputs.

    `gram` is X_hat^T X_hat over inputs of the partially quantized model,
    `cross` is X_hat^T (X - X_hat), `fp_gram` is X^T X over full-precision
    inputs and `act_absmax` the per-channel max |X_hat|.
    """
    gram: np.ndarray
    cross: np.ndarray
    fp_gram: np.ndarray
    act_absmax: np.ndarray
    token_count: int = 0

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n)), np.zeros(n), 0)

    @property
    def dim(self):
        return self.gram.shape[0]

    def objective(self, W, W_hat):
        """||X_hat W_hat - X W||_F^2 expressed through the accumulated moments."""
        W = np.asarray(W, dtype=np.float64)
        W_hat = np.asarray(W_hat, dtype=np.float64)
        xhat_x = self.gram + self.cross
        value = (np.sum(W_hat * (self.gram @ W_hat))
                 - 2.0 * np.sum(W_hat * (xhat_x @ W))
                 + np.sum(W * (self.fp_gram @ W)))
        return max(float(value), 0.0)

    def transformed(self, K):
        """Statistics of the inputs X K, for an invertible input map K."""
        K = np.asarray(K, dtype=np.float64)
        return CalibStats(K.T @ self.gram @ K, K.T @ self.cross @ K, K.T @ self.fp_gram @ K,
                          self.act_absmax, self.token_count)


def accumulate_stats(stats, x_fp, x_pert):
    """Add one batch of full-precision and perturbed inputs (both T x N)."""
    x_fp = np.asarray(x_fp, dtype=np.float64)
    x_pert = np.asarray(x_pert, dtype=np.float64)
    if x_fp.shape != x_pert.shape or x_fp.ndim != 2:
        raise InvalidInputError('input batches must share a 2-D shape, got %r and %r' % (
            x_fp.shape, x_pert.shape))
    if x_fp.shape[1] != stats.dim:
        raise InvalidInputError('batch width %d does not match statistics dimension %d' % (
            x_fp.shape[1], stats.dim))
    absmax = np.abs(x_pert).max(axis=0) if len(x_pert) else np.zeros(stats.dim)
    return CalibStats(
        gram=stats.gram + x_pert.T @ x_pert,
        cross=stats.cross + x_pert.T @ (x_fp - x_pert),
        fp_gram=stats.fp_gram + x_fp.T @ x_fp,
        act_absmax=np.maximum(stats.act_absmax, absmax),
        token_count=stats.token_count + x_fp.shape[0],
    )


class Strategy:
    "Collection of calibration sampling strategies."
    CONCAT_CHUNK = "concat_chunk"
    DROP_HEAD = "drop_head"
    DROP_RAND = "drop_rand"

    ALL = (CONCAT_CHUNK, DROP_HEAD, DROP_RAND)


class XorShift64Star(object):
    """xorshift64* generator (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D).

    The state is seeded through one splitmix64 step so seed 0 is usable.
    """

    MULTIPLIER = 0x2545F4914F6CDD1D

    def __init__(self, seed):
        z = (int(seed) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULTIPLIER) & _MASK64

    def randbelow(self, n):
        "Uniform integer in [0, n) by multiply-shift."
        return (self.next_u64() * n) >> 64


class TokenCorpus(object):

    def __init__(self, tokens, vocab):
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        if tokens.size == 0:
            raise InvalidInputError('token corpus is empty')
        if tokens.min() < 0 or tokens.max() >= vocab:
            raise InvalidInputError('token ids must lie in [0, %d)' % vocab)
        self.tokens = tokens
        self.vocab = int(vocab)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class CalibSet:
    sequences: np.ndarray
    strategy: str
    seed: int

    @property
    def n(self):
        return self.sequences.shape[0]

    @property
    def length(self):
        return self.sequences.shape[1]

    def __iter__(self):
        return iter(self.sequences)


def drop_length(T):
    "Tokens discarded at the head of each source window by drop_head."
    return T // 4


def _require(available, required, strategy):
    if available < required:
        raise InvalidInputError(
            'strategy %s needs %d tokens but the corpus has %d (short by %d)' % (
                strategy, required, available, required - available))


def _random_windows(n_tokens, n, T, rng):
    """Starts of n disjoint windows of length T, drawn with rejection.

    Falls back to a shuffle of aligned chunks when rejection stalls.
    """
    starts = []
    attempts = 0
    limit = 1000 * n
    while len(starts) < n and attempts < limit:
        attempts += 1
        s = rng.randbelow(n_tokens - T + 1)
        if all(s + T <= t or t + T <= s for t in starts):
            starts.append(s)
    if len(starts) == n:
        return starts
    log.debug('random window rejection stalled, using aligned chunks')
    slots = list(range(n_tokens // T))
    for i in range(len(slots) - 1, 0, -1):
        j = rng.randbelow(i + 1)
        slots[i], slots[j] = slots[j], slots[i]
    return [slot * T for slot in slots[:n]]


def sample_calib(corpus, strategy, n, T, seed=0):
    """Build n calibration sequences of exactly T tokens from the corpus."""
    if n < 1 or T < 1:
        raise InvalidInputError('calibration needs n >= 1 and T >= 1')
    tokens = corpus.tokens
    if strategy == Strategy.CONCAT_CHUNK:
        _require(len(tokens), n * T, strategy)
        seqs = [tokens[i * T:(i + 1) * T] for i in range(n)]
    elif strategy == Strategy.DROP_HEAD:
        D = drop_length(T)
        _require(len(tokens), n * (T + D), strategy)
        seqs = [tokens[i * (T + D) + D:(i + 1) * (T + D)] for i in range(n)]
    elif strategy == Strategy.DROP_RAND:
        _require(len(tokens), n * T, strategy)
        rng = XorShift64Star(seed)
        seqs = [tokens[s:s + T] for s in _random_windows(len(tokens), n, T, rng)]
    else:
        raise InvalidInputError('unknown calibration strategy %r, expected one of %r' % (
            strategy, Strategy.ALL))
    return CalibSet(np.stack(seqs).astype(np.int64), strategy, int(seed))


def collect_layer_inputs(model, calib, layer_id):
    """Stacked per-token inputs of one linear module under the full-precision forward."""
    if layer_id not in model.linear_names():
        raise InvalidInputError('unknown layer id %r' % (layer_id,))
    rows = [model.forward_with_taps(seq).inputs[layer_id] for seq in calib]
    return np.concatenate(rows, axis=0)


def synthetic_corpus(n_tokens, vocab=256, seed=0, exponent=1.1):
    """Seeded Zipf-like token stream, used when no corpus file is given."""
    rng = XorShift64Star(seed)
    weights = 1.0 / np.arange(1, vocab + 1) ** exponent
    cdf = np.cumsum(weights / weights.sum())
    draws = np.array([rng.next_u64() for _ in range(n_tokens)], dtype=np.float64) / 2.0 ** 64
    tokens = np.minimum(np.searchsorted(cdf, draws, side='right'), vocab - 1)
    return TokenCorpus(tokens, vocab)


def read_corpus(path, mode='binary', vocab=None):
    """Read a corpus file.

    binary: raw 32-bit little-endian token ids. text: bytes are ids (vocab 256).
    Ids must lie below `vocab` when it is given.
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ContainerError('cannot read corpus %r: %s' % (path, e))
    if mode == 'text':
        return TokenCorpus(np.frombuffer(data, dtype=np.uint8), 256 if vocab is None else vocab)
    if mode != 'binary':
        raise InvalidInputError('unknown corpus mode %r' % (mode,))
    if len(data) % 4:
        raise ContainerError('binary corpus %r is not a whole number of 32-bit ids' % (path,))
    tokens = np.frombuffer(data, dtype='<u4').astype(np.int64)
    if vocab is None:
        vocab = int(tokens.max()) + 1 if tokens.size else 1
    return TokenCorpus(tokens, vocab)


def write_calib_set(calib, path):
    with open(path, 'w') as f:
        json.dump({
            'strategy': calib.strategy,
            'seed': calib.seed,
            'sequences': calib.sequences.tolist(),
        }, f, indent=1)


def read_calib_set(path):
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, ValueError) as e:
        raise ContainerError('cannot read calibration set %r: %s' % (path, e))
    try:
        return CalibSet(np.asarray(d['sequences'], dtype=np.int64), d['strategy'], int(d['seed']))
    except KeyError as e:
        raise ContainerError('calibration set %r has no %s entry' % (path, e))
    except (TypeError, ValueError) as e:
        raise ContainerError('malformed calibration set %r: %s' % (path, e))
