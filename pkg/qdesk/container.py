# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""The OCW tensor container.

Layout::

    b"OCW1" | header length (uint64, little-endian) | UTF-8 JSON header | payload

The header is compact JSON with sorted keys::

    {"format": "ocw", "version": 1, "metadata": {...},
     "tensors": [{"name", "encoding", "shape", "offset", "nbytes", "params"}, ...]}

Offsets are relative to the start of the payload; tensors are laid out in
header order without gaps, so the payload length is the sum of `nbytes`.
"""

import io
import json
import struct
from collections import OrderedDict, namedtuple

import numpy as np

from .log import ContainerError, InvalidInputError
from . import log
from .quant_format import (
    QuantConfig, QuantizedMatrix, serialize_quantized, deserialize_quantized, storage_bytes_for,
)
from .quantizing.binfact import (
    BinfactFormat, DbfMatrix, MdbfMatrix, serialize_binfact, deserialize_binfact,
    storage_bytes_binfact,
)

__all__ = [
    "MAGIC", "Encoding", "TensorRecord", "encode_tensor", "decode_tensor",
    "dumps", "loads", "store", "load", "read_header",
]


MAGIC = b"OCW1"
FORMAT_NAME = "ocw"
FORMAT_VERSION = 1

_LENGTH = struct.Struct('<Q')


class Encoding:
    "Collection of tensor encodings."
    F32 = "f32"
    UNIFORM = "uniform-quant"
    DBF = "dbf"
    MDBF = "mdbf"

    ALL = (F32, UNIFORM, DBF, MDBF)


# One tensor: encoding, shape, encoding params and payload bytes
TensorRecord = namedtuple('TensorRecord', ('encoding', 'shape', 'params', 'data'))


def _expected_nbytes(encoding, shape, params):
    if encoding == Encoding.F32:
        return 4 * int(np.prod(shape, dtype=np.int64))
    if encoding == Encoding.UNIFORM:
        return storage_bytes_for(tuple(shape), QuantConfig.from_dict(params))
    N, M = shape
    R = params['rank']
    if encoding == Encoding.DBF:
        params_count = N + R + M
    else:
        params_count = params['envelope_rank'] * (N + M + 2 * R)
    return (N * R + 7) // 8 + (M * R + 7) // 8 + 2 * params_count


def encode_tensor(value):
    """TensorRecord for a float array, a QuantizedMatrix or a binary-factor matrix."""
    if isinstance(value, QuantizedMatrix):
        return TensorRecord(Encoding.UNIFORM, list(value.shape), value.config.to_dict(),
                            serialize_quantized(value))
    if isinstance(value, (DbfMatrix, MdbfMatrix)):
        params = dict(rank=int(value.rank))
        encoding = Encoding.DBF
        if isinstance(value, MdbfMatrix):
            encoding = Encoding.MDBF
            params['envelope_rank'] = int(value.envelope_rank)
        data = serialize_binfact(value)
        assert len(data) == storage_bytes_binfact(value)
        return TensorRecord(encoding, list(value.shape), params, data)
    arr = np.asarray(value, dtype=np.float32)
    return TensorRecord(Encoding.F32, list(arr.shape), {}, arr.astype('<f4').tobytes())


def decode_tensor(record):
    """Inverse of `encode_tensor`."""
    encoding, shape, params, data = record
    try:
        if encoding == Encoding.F32:
            return np.frombuffer(data, dtype='<f4').astype(np.float32).reshape(shape)
        if encoding == Encoding.UNIFORM:
            return deserialize_quantized(data, tuple(shape), QuantConfig.from_dict(params))
        if encoding in (Encoding.DBF, Encoding.MDBF):
            fmt = BinfactFormat.DBF if encoding == Encoding.DBF else BinfactFormat.MDBF
            return deserialize_binfact(data, tuple(shape), fmt, params['rank'],
                                       params.get('envelope_rank', 1))
    except (InvalidInputError, KeyError, ValueError) as e:
        raise ContainerError('cannot decode %s tensor of shape %r: %s' % (encoding, shape, e))
    raise ContainerError('unknown tensor encoding %r' % (encoding,))


def dumps(tensors, metadata=None):
    """Serialize an ordered mapping name -> TensorRecord (or value) to bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, rec in tensors.items():
        if not isinstance(rec, TensorRecord):
            rec = encode_tensor(rec)
        nbytes = len(rec.data)
        entries.append(OrderedDict([
            ('name', name), ('encoding', rec.encoding), ('shape', [int(s) for s in rec.shape]),
            ('offset', offset), ('nbytes', nbytes), ('params', rec.params),
        ]))
        chunks.append(rec.data)
        offset += nbytes
    header = dict(format=FORMAT_NAME, version=FORMAT_VERSION, metadata=metadata or {},
                  tensors=entries)
    raw = json.dumps(header, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf8')
    return b''.join([MAGIC, _LENGTH.pack(len(raw)), raw] + chunks)


def _parse_header(buf):
    if len(buf) < len(MAGIC) + _LENGTH.size or buf[:len(MAGIC)] != MAGIC:
        raise ContainerError('not an OCW container (bad magic)')
    start = len(MAGIC) + _LENGTH.size
    (length,) = _LENGTH.unpack(buf[len(MAGIC):start])
    if start + length > len(buf):
        raise ContainerError('truncated OCW header: %d bytes announced, %d available' % (
            length, len(buf) - start))
    try:
        header = json.loads(buf[start:start + length].decode('utf8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise ContainerError('malformed OCW header: %s' % e)
    if not isinstance(header, dict) or header.get('format') != FORMAT_NAME:
        raise ContainerError('malformed OCW header: missing format tag')
    if header.get('version') != FORMAT_VERSION:
        raise ContainerError('unsupported OCW version %r' % (header.get('version'),))
    if not isinstance(header.get('tensors'), list):
        raise ContainerError('malformed OCW header: no tensor list')
    return header, start + length


def read_header(buf):
    return _parse_header(buf)[0]


def loads(buf):
    """Parse container bytes into (metadata, OrderedDict name -> TensorRecord).

    Offsets must be ascending without overlap or gaps, each tensor's size
    must match its encoding and the payload must end with the last tensor.
    """
    header, payload_start = _parse_header(buf)
    payload = buf[payload_start:]
    tensors = OrderedDict()
    expected_offset = 0
    for entry in header['tensors']:
        try:
            name = entry['name']
            encoding = entry['encoding']
            shape = [int(s) for s in entry['shape']]
            offset = int(entry['offset'])
            nbytes = int(entry['nbytes'])
            params = entry.get('params') or {}
        except (KeyError, TypeError, ValueError) as e:
            raise ContainerError('malformed tensor entry %r: %s' % (entry, e))
        if encoding not in Encoding.ALL:
            raise ContainerError('tensor %s has unknown encoding %r' % (name, encoding))
        if name in tensors:
            raise ContainerError('duplicate tensor %s' % name)
        if offset != expected_offset:
            raise ContainerError('tensor %s at offset %d, expected %d' % (name, offset, expected_offset))
        try:
            size = _expected_nbytes(encoding, shape, params)
        except (InvalidInputError, KeyError, ValueError, TypeError) as e:
            raise ContainerError('tensor %s has invalid parameters: %s' % (name, e))
        if size != nbytes:
            raise ContainerError('tensor %s declares %d bytes, its encoding needs %d' % (name, nbytes, size))
        if offset + nbytes > len(payload):
            raise ContainerError('truncated payload: tensor %s ends at %d, payload has %d bytes' % (
                name, offset + nbytes, len(payload)))
        tensors[name] = TensorRecord(encoding, shape, params, payload[offset:offset + nbytes])
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise ContainerError('payload has %d trailing bytes' % (len(payload) - expected_offset))
    return header.get('metadata') or {}, tensors


def store(path, tensors, metadata=None):
    data = dumps(tensors, metadata)
    with io.open(path, 'wb') as f:
        f.write(data)
    log.debug('wrote %d tensors (%d bytes) to %s', len(tensors), len(data), path)
    return len(data)


def load(path):
    with io.open(path, 'rb') as f:
        buf = f.read()
    return loads(buf)
