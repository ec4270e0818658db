"""
Token shard files and corpus manifests.

Shard layout (little-endian):
    magic        8 bytes  b'OSRSHARD'
    version      u32
    token width  u32      bytes per id, always 4
    token count  u64
    vocab size   u32
    eod id       u32
    fingerprint  32 bytes raw sha256 of the tokenizer descriptor
    payload      count x u32
    crc32        u32      over every preceding byte
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from pydantic import BaseModel, ValidationError

from errors import DataError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b'OSRSHARD'
VERSION = 1
TOKEN_WIDTH = 4
HEADER = struct.Struct('<8sIIQII32s')
CRC = struct.Struct('<I')


@dataclass(frozen=True)
class TokenShard:
    """One tokenized shard: header fields plus a read-only uint32 payload."""
    tokens: np.ndarray
    vocab_size: int
    eod_id: int
    fingerprint: str
    version: int = VERSION

    def __post_init__(self):
        tokens = np.ascontiguousarray(self.tokens, dtype='<u4')
        tokens.setflags(write=False)
        object.__setattr__(self, 'tokens', tokens)
        if tokens.size and int(tokens.max()) >= self.vocab_size:
            pos = int(np.argmax(tokens >= self.vocab_size))
            raise DataError(f"token id {int(tokens[pos])} at offset {pos} exceeds vocab {self.vocab_size}")
        if len(bytes.fromhex(self.fingerprint)) != 32:
            raise DataError("fingerprint must be a sha256 hex digest")

    @property
    def token_count(self):
        return int(self.tokens.size)

    def documents(self):
        """Split the payload into documents, each ending with its EOD token."""
        ends = np.flatnonzero(self.tokens == self.eod_id)
        docs, start = [], 0
        for end in ends:
            docs.append(self.tokens[start:end + 1])
            start = end + 1
        if start < self.tokens.size:
            docs.append(self.tokens[start:])
        return docs

    @classmethod
    def from_documents(cls, documents, vocab_size, eod_id, fingerprint):
        parts = []
        for doc in documents:
            doc = np.asarray(doc, dtype='<u4')
            if doc.size == 0 or doc[-1] != eod_id:
                doc = np.append(doc, np.uint32(eod_id)).astype('<u4')
            parts.append(doc)
        tokens = np.concatenate(parts) if parts else np.zeros(0, dtype='<u4')
        return cls(tokens=tokens, vocab_size=vocab_size, eod_id=eod_id, fingerprint=fingerprint)


def encode_shard(shard):
    header = HEADER.pack(MAGIC, shard.version, TOKEN_WIDTH, shard.token_count, shard.vocab_size,
                         shard.eod_id, bytes.fromhex(shard.fingerprint))
    body = header + shard.tokens.astype('<u4').tobytes()
    return body + CRC.pack(zlib.crc32(body))


def decode_shard(data, source='<bytes>'):
    if len(data) < HEADER.size + CRC.size:
        raise FormatError(f"{source}: truncated shard ({len(data)} bytes)")
    body, (crc,) = data[:-CRC.size], CRC.unpack(data[-CRC.size:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{source}: CRC mismatch (truncated or corrupted shard)")
    magic, version, width, count, vocab, eod, fp = HEADER.unpack_from(body)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported shard version {version}")
    if width != TOKEN_WIDTH:
        raise FormatError(f"{source}: unsupported token width {width}")
    payload = body[HEADER.size:]
    if len(payload) != count * TOKEN_WIDTH:
        raise FormatError(f"{source}: header says {count} tokens, payload holds {len(payload) // TOKEN_WIDTH}")
    tokens = np.frombuffer(payload, dtype='<u4')
    return TokenShard(tokens=tokens, vocab_size=vocab, eod_id=eod, fingerprint=fp.hex(), version=version)


def write_shard(shard, path):
    """Write atomically: temp file then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(encode_shard(shard))
    os.replace(tmp, path)
    logger.info(f"Wrote shard {path} with {shard.token_count} tokens")
    return path


def read_shard(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"shard not found: {path}")
    return decode_shard(path.read_bytes(), source=str(path))


class TokenizerDescriptor(BaseModel):
    name: str
    vocab_size: int
    eod_id: int
    fingerprint: str


class CorpusManifest(BaseModel):
    """JSON manifest listing a dataset's shards; paths are relative to the manifest."""
    dataset: str
    tokenizer: TokenizerDescriptor
    shards: List[str]


@dataclass
class Corpus:
    dataset: str
    tokenizer: TokenizerDescriptor
    shards: list

    @property
    def token_count(self):
        return sum(s.token_count for s in self.shards)


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    return path


def load_corpus(manifest_path):
    """
    Read a corpus manifest and all of its shards.

    Raises:
        DataError: missing manifest/shards, schema violations, or any shard
            whose vocab, EOD id or tokenizer fingerprint disagrees with the
            manifest
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"corpus manifest not found: {manifest_path}")
    try:
        manifest = CorpusManifest(**json.loads(manifest_path.read_text()))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DataError(f"{manifest_path}: invalid corpus manifest: {e}") from e
    if not manifest.shards:
        raise DataError(f"{manifest_path}: corpus lists no shards")

    tok = manifest.tokenizer
    shards = []
    for rel in manifest.shards:
        shard = read_shard(manifest_path.parent / rel)
        if shard.fingerprint != tok.fingerprint:
            raise DataError(f"{rel}: tokenizer fingerprint mismatch with manifest")
        if shard.vocab_size != tok.vocab_size or shard.eod_id != tok.eod_id:
            raise DataError(f"{rel}: vocab/EOD mismatch with manifest")
        shards.append(shard)
    logger.info(f"Loaded corpus '{manifest.dataset}': {len(shards)} shards")
    return Corpus(dataset=manifest.dataset, tokenizer=tok, shards=shards)


def check_compatible(shards):
    """All shards of one run must share tokenizer fingerprint, vocab and EOD id."""
    if not shards:
        raise DataError("empty corpus: no shards")
    first = shards[0]
    for i, s in enumerate(shards[1:], start=1):
        if s.fingerprint != first.fingerprint:
            raise DataError(f"shard {i}: tokenizer fingerprint differs from shard 0")
        if s.vocab_size != first.vocab_size or s.eod_id != first.eod_id:
            raise DataError(f"shard {i}: vocab/EOD differs from shard 0")
    return first
