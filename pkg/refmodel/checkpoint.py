"""
Self-describing checkpoint format.

Layout (little-endian):
    magic      8 bytes  b'OSRCKPT\\0'
    version    u32
    meta_len   u32, then meta_len bytes of canonical JSON (configs, counters,
               loss history)
    n_tensors  u32, then per tensor:
        name_len u16, name (utf-8), dtype u8, ndim u8, ndim x u64 dims,
        nbytes u64, raw data
    crc32      u32 over every preceding byte

Tensor names: 'model/<param>', 'optim/exp_avg/<param>',
'optim/exp_avg_sq/<param>', 'optim/step/<param>', 'rng/torch'. The tied
output head is stored once, as the embedding.
"""

import json
import logging
import os
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

MAGIC = b'OSRCKPT\x00'
VERSION = 1

DTYPE_CODES = {torch.float32: 1, torch.float64: 2, torch.int64: 3, torch.uint8: 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {1: '<f4', 2: '<f8', 3: '<i8', 4: 'u1'}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':')).encode('utf-8')


def encode(meta, tensors):
    """
    Serialize metadata and an ordered {name: tensor} mapping.

    Returns:
        bytes
    """
    out = bytearray(MAGIC)
    meta_bytes = canonical_json(meta)
    out += struct.pack('<II', VERSION, len(meta_bytes))
    out += meta_bytes
    out += struct.pack('<I', len(tensors))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = DTYPE_CODES[t.dtype]
        raw = t.numpy().astype(NUMPY_DTYPES[code], copy=False).tobytes()
        name_bytes = name.encode('utf-8')
        out += struct.pack('<H', len(name_bytes)) + name_bytes
        out += struct.pack('<BB', code, t.dim())
        out += struct.pack(f'<{t.dim()}Q', *t.shape)
        out += struct.pack('<Q', len(raw))
        out += raw
    out += struct.pack('<I', zlib.crc32(bytes(out)))
    return bytes(out)


def decode(data, source='<bytes>'):
    """
    Parse checkpoint bytes; the CRC is verified before anything is built.

    Returns:
        tuple: (meta dict, ordered {name: tensor})
    """
    if len(data) < len(MAGIC) + 12 + 4:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    body, (crc,) = data[:-4], struct.unpack('<I', data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch (truncated or corrupted checkpoint)")
    if body[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {body[:8]!r}")
    version, meta_len = struct.unpack_from('<II', body, 8)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(body[pos:pos + meta_len].decode('utf-8'))
    pos += meta_len
    (count,) = struct.unpack_from('<I', body, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode('utf-8')
            pos += name_len
            code, ndim = struct.unpack_from('<BB', body, pos)
            pos += 2
            shape = struct.unpack_from(f'<{ndim}Q', body, pos)
            pos += 8 * ndim
            (nbytes,) = struct.unpack_from('<Q', body, pos)
            pos += 8
            if code not in CODE_DTYPES:
                raise CheckpointError(f"{source}: {name}: unknown dtype code {code}")
            array = np.frombuffer(body[pos:pos + nbytes], dtype=NUMPY_DTYPES[code]).reshape(shape)
            pos += nbytes
            tensors[name] = torch.from_numpy(array.copy())
    except struct.error as e:
        raise CheckpointError(f"{source}: malformed tensor table: {e}") from e
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes")
    return meta, tensors


def write_atomic(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_bytes(path):
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def load_model_tensors(model, tensors, prefix='model/'):
    """
    Copy checkpoint tensors into a model.

    Raises:
        ConfigError: naming the first tensor whose presence or shape differs
    """
    expected = model.named_tensors()
    stored = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    for name, p in expected.items():
        if name not in stored:
            raise ConfigError(f"checkpoint has no tensor '{name}' required by the model config")
        if tuple(stored[name].shape) != tuple(p.shape):
            raise ConfigError(
                f"tensor '{name}': checkpoint shape {tuple(stored[name].shape)} != model shape {tuple(p.shape)}"
            )
    for name in stored:
        if name not in expected:
            raise ConfigError(f"checkpoint tensor '{name}' has no place in the model config")
    with torch.no_grad():
        for name, p in expected.items():
            p.copy_(stored[name].to(p.dtype))
    return model
