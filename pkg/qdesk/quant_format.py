# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Uniform integer quantization format.

A weight matrix ``W`` of shape (N, M) maps inputs of width N to outputs of
width M. A *channel* is one output column ``W[:, j]``. Grids are arranged in
a (K, C) array: K runs of consecutive input indices (one run unless the
config is per-group) times C grid columns (M, or 1 for per-tensor). Group
index ``t = k * C + j`` orders grids on disk.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .log import InvalidInputError


class Scheme:
    "Collection of valid values for QuantConfig.scheme."
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"

    ALL = (SYMMETRIC, ASYMMETRIC)


class Granularity:
    "Collection of valid values for QuantConfig.granularity."
    PER_TENSOR = "per-tensor"
    PER_CHANNEL = "per-channel"
    PER_GROUP = "per-group"

    ALL = (PER_TENSOR, PER_CHANNEL, PER_GROUP)


# Metadata widths in bytes per group
SCALE_BYTES = 2
ZERO_POINT_BYTES = {
    Scheme.SYMMETRIC: 0,
    Scheme.ASYMMETRIC: 1,
}

HALF_MAX = 65504.0
HALF_TINY = 2.0 ** -24


def codebook_range(bits, scheme):
    """Integer code range (q_min, q_max) for a bit width and scheme.

    Asymmetric codes are unsigned [0, 2^b - 1], symmetric codes are signed
    [-(2^(b-1) - 1), 2^(b-1) - 1].
    """
    if scheme == Scheme.ASYMMETRIC:
        return 0, (1 << bits) - 1
    half = (1 << (bits - 1)) - 1
    return -half, half


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    scheme: str = Scheme.SYMMETRIC
    granularity: str = Granularity.PER_CHANNEL
    group_size: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 1 <= self.bits <= 8:
            raise InvalidInputError('bits must be an integer in [1, 8], got %r' % (self.bits,))
        if self.scheme not in Scheme.ALL:
            raise InvalidInputError('unknown scheme %r, expected one of %r' % (self.scheme, Scheme.ALL))
        if self.scheme == Scheme.SYMMETRIC and self.bits < 2:
            raise InvalidInputError('symmetric quantization needs at least 2 bits')
        if self.granularity not in Granularity.ALL:
            raise InvalidInputError('unknown granularity %r, expected one of %r' % (
                self.granularity, Granularity.ALL))
        if self.granularity == Granularity.PER_GROUP:
            if self.group_size is None or self.group_size < 1:
                raise InvalidInputError('per-group granularity needs group_size >= 1')
        elif self.group_size is not None:
            raise InvalidInputError('group_size is only valid for per-group granularity')

    @classmethod
    def from_group(cls, bits, group_size=None, scheme=Scheme.SYMMETRIC):
        """Build a config from a group size, None meaning per-channel."""
        if group_size is None:
            return cls(bits=bits, scheme=scheme, granularity=Granularity.PER_CHANNEL)
        return cls(bits=bits, scheme=scheme, granularity=Granularity.PER_GROUP,
                   group_size=int(group_size))

    @property
    def q_min(self):
        return codebook_range(self.bits, self.scheme)[0]

    @property
    def q_max(self):
        return codebook_range(self.bits, self.scheme)[1]

    @property
    def symmetric(self):
        return self.scheme == Scheme.SYMMETRIC

    def label(self):
        if self.granularity == Granularity.PER_GROUP:
            group = 'g%d' % self.group_size
        elif self.granularity == Granularity.PER_CHANNEL:
            group = 'ch'
        else:
            group = 'tensor'
        return '%db/%s/%s' % (self.bits, group, 'sym' if self.symmetric else 'asym')

    def to_dict(self):
        d = dict(bits=int(self.bits), scheme=self.scheme, granularity=self.granularity)
        if self.group_size is not None:
            d['group_size'] = int(self.group_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(bits=int(d['bits']), scheme=d['scheme'], granularity=d['granularity'],
                   group_size=d.get('group_size'))


@dataclass(frozen=True)
class QuantGrid:
    scale: float
    zero_point: int
    q_min: int
    q_max: int

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidInputError('grid scale must be positive and finite, got %r' % (self.scale,))
        if not self.q_min < self.q_max:
            raise InvalidInputError('grid needs q_min < q_max, got [%d, %d]' % (self.q_min, self.q_max))
        if not self.q_min <= self.zero_point <= self.q_max:
            raise InvalidInputError('zero-point %d outside [%d, %d]' % (
                self.zero_point, self.q_min, self.q_max))


def quantize_scalar(w, grid):
    """Quantize one value against a grid, returning (code, reconstruction)."""
    code = int(np.clip(np.rint(w / grid.scale) + grid.zero_point, grid.q_min, grid.q_max))
    return code, grid.scale * (code - grid.zero_point)


def _finite_values(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise InvalidInputError('cannot calibrate a grid on empty input')
    if not np.all(np.isfinite(values)):
        raise InvalidInputError('cannot calibrate a grid on non-finite input')
    return values


def calibrate_asymmetric(values, bits):
    """Min-max calibration of an unsigned grid.

    A constant input gets scale 1 and the zero-point that decodes the
    constant with the least error.
    """
    values = _finite_values(values)
    q_min, q_max = codebook_range(bits, Scheme.ASYMMETRIC)
    w_min, w_max = float(values.min()), float(values.max())
    if w_max == w_min:
        scale = 1.0
    else:
        scale = (w_max - w_min) / (q_max - q_min)
    zero = int(np.clip(np.rint(q_min - w_min / scale), q_min, q_max))
    return QuantGrid(scale, zero, q_min, q_max)


def calibrate_symmetric(values, bits):
    """Max-abs calibration of a signed grid with zero-point 0."""
    values = _finite_values(values)
    if bits < 2:
        raise InvalidInputError('symmetric quantization needs at least 2 bits')
    q_min, q_max = codebook_range(bits, Scheme.SYMMETRIC)
    w_abs = max(abs(float(values.min())), abs(float(values.max())))
    scale = w_abs / q_max if w_abs > 0 else 1.0
    return QuantGrid(scale, 0, q_min, q_max)


def calibrate(values, cfg):
    if cfg.symmetric:
        return calibrate_symmetric(values, cfg.bits)
    return calibrate_asymmetric(values, cfg.bits)


def to_half(x):
    """Snap positive values onto the float16 grid, keeping float32 storage."""
    x = np.clip(np.asarray(x, dtype=np.float64), HALF_TINY, HALF_MAX)
    return x.astype(np.float16).astype(np.float32)


def snap_half(x):
    """Snap arbitrary values onto the float16 grid, keeping float32 storage."""
    x = np.clip(np.asarray(x, dtype=np.float64), -HALF_MAX, HALF_MAX)
    return x.astype(np.float16).astype(np.float32)


def group_bounds(n_rows, cfg):
    """List of (start, stop) runs along the input axis sharing one grid."""
    if cfg.granularity != Granularity.PER_GROUP:
        return [(0, n_rows)]
    G = cfg.group_size
    return [(start, min(start + G, n_rows)) for start in range(0, n_rows, G)]


def grid_columns(n_cols, cfg):
    return 1 if cfg.granularity == Granularity.PER_TENSOR else n_cols


def check_shape(shape, cfg):
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise InvalidInputError('expected a non-empty 2-D matrix, got shape %r' % (shape,))


class QuantizedMatrix(object):
    """Integer codes plus one grid per group.

    Codes are held unpacked (one small integer per element); packing
    happens in `serialize_quantized`.
    """

    def __init__(self, config, codes, scales, zeros):
        self.config = config
        self.codes = np.asarray(codes, dtype=np.int16)
        self.scales = np.asarray(scales, dtype=np.float32)
        self.zeros = np.asarray(zeros, dtype=np.int16)
        check_shape(self.codes.shape, config)
        expected = (len(group_bounds(self.shape[0], config)), grid_columns(self.shape[1], config))
        if self.scales.shape != expected or self.zeros.shape != expected:
            raise InvalidInputError('grid arrays have shape %r/%r, expected %r' % (
                self.scales.shape, self.zeros.shape, expected))

    @property
    def shape(self):
        return self.codes.shape

    @property
    def n_groups(self):
        return self.scales.size

    @property
    def q_min(self):
        return self.config.q_min

    @property
    def q_max(self):
        return self.config.q_max

    def grid(self, k, c):
        return QuantGrid(float(self.scales[k, c]), int(self.zeros[k, c]), self.q_min, self.q_max)

    def element_grids(self):
        """Per-element (scale, zero) arrays of the matrix shape."""
        N, M = self.shape
        rows = np.concatenate([np.full(stop - start, k) for k, (start, stop)
                               in enumerate(group_bounds(N, self.config))])
        cols = np.zeros(M, dtype=int) if self.scales.shape[1] == 1 else np.arange(M)
        return self.scales[np.ix_(rows, cols)], self.zeros[np.ix_(rows, cols)]

    def copy(self):
        return QuantizedMatrix(self.config, self.codes.copy(), self.scales.copy(), self.zeros.copy())

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (self.config == other.config and
                np.array_equal(self.codes, other.codes) and
                np.array_equal(self.scales, other.scales) and
                np.array_equal(self.zeros, other.zeros))

    def __repr__(self):
        return '<QuantizedMatrix %dx%d %s>' % (self.shape + (self.config.label(),))


def is_valid_quantized(Q):
    """Check codes lie in the codebook and grids are well formed."""
    if not isinstance(Q, QuantizedMatrix):
        return False
    if Q.codes.size and (Q.codes.min() < Q.q_min or Q.codes.max() > Q.q_max):
        return False
    if not np.all(np.isfinite(Q.scales)) or np.any(Q.scales <= 0):
        return False
    if Q.zeros.size and (Q.zeros.min() < Q.q_min or Q.zeros.max() > Q.q_max):
        return False
    if Q.config.symmetric and np.any(Q.zeros != 0):
        return False
    return True


def dequantize(Q):
    """Reconstruct W_hat[i, j] = s_g (q_ij - z_g)."""
    scales, zeros = Q.element_grids()
    if Q.config.symmetric:
        return (scales * Q.codes).astype(np.float32)
    return (scales * (Q.codes.astype(np.int32) - zeros)).astype(np.float32)


def code_bytes(n_elements, bits):
    return (n_elements * bits + 7) // 8


def storage_bytes_for(shape, cfg):
    """Payload size of a quantized matrix of this shape and config."""
    N, M = shape
    n_groups = len(group_bounds(N, cfg)) * grid_columns(M, cfg)
    return code_bytes(N * M, cfg.bits) + n_groups * (SCALE_BYTES + ZERO_POINT_BYTES[cfg.scheme])


def storage_bytes(Q):
    return storage_bytes_for(Q.shape, Q.config)


def pack_codes(codes, bits, q_min):
    """Bit-pack integer codes LSB-first, `bits` bits per code."""
    u = np.asarray(codes, dtype=np.int64).ravel() - q_min
    planes = ((u[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder='little').tobytes()


def unpack_codes(buf, count, bits, q_min):
    raw = np.frombuffer(buf, dtype=np.uint8)
    planes = np.unpackbits(raw, count=count * bits, bitorder='little')
    planes = planes.reshape(count, bits).astype(np.int64)
    return (planes << np.arange(bits)).sum(axis=1) + q_min


def serialize_quantized(Q):
    """Payload bytes: packed codes, then float16 scales, then uint8 zero-points."""
    parts = [
        pack_codes(Q.codes, Q.config.bits, Q.q_min),
        Q.scales.ravel().astype('<f2').tobytes(),
    ]
    if not Q.config.symmetric:
        parts.append(Q.zeros.ravel().astype(np.uint8).tobytes())
    return b''.join(parts)


def deserialize_quantized(buf, shape, cfg):
    N, M = shape
    expected = storage_bytes_for(shape, cfg)
    if len(buf) != expected:
        raise InvalidInputError('quantized payload has %d bytes, expected %d' % (len(buf), expected))
    grid_shape = (len(group_bounds(N, cfg)), grid_columns(M, cfg))
    n_groups = grid_shape[0] * grid_shape[1]
    n_code = code_bytes(N * M, cfg.bits)
    codes = unpack_codes(buf[:n_code], N * M, cfg.bits, cfg.q_min).reshape(N, M)
    offset = n_code
    scales = np.frombuffer(buf[offset:offset + 2 * n_groups], dtype='<f2')
    offset += 2 * n_groups
    if cfg.symmetric:
        zeros = np.zeros(n_groups, dtype=np.int16)
    else:
        zeros = np.frombuffer(buf[offset:offset + n_groups], dtype=np.uint8)
    return QuantizedMatrix(cfg, codes, scales.astype(np.float32).reshape(grid_shape),
                           zeros.astype(np.int16).reshape(grid_shape))
