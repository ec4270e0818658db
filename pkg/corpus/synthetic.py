"""Deterministic repetitive corpora for toy training runs and tests."""

import logging
from pathlib import Path

import numpy as np

from corpus.shards import CorpusManifest, TokenizerDescriptor, TokenShard, write_manifest, write_shard
from corpus.tokenizer import ByteTokenizer

logger = logging.getLogger(__name__)


def synthetic_documents(n_tokens, vocab_size=256, eod_id=0, seed=0, n_phrases=48, follow_prob=0.85):
    """
    Documents built from a fixed phrase pool.

    Each phrase has a preferred successor taken with probability
    follow_prob, so next-token prediction is highly learnable while the
    stream is not a single repeated string.
    """
    rng = np.random.default_rng(seed)
    low = 1 if eod_id == 0 else 0
    phrases = []
    for _ in range(n_phrases):
        phrase = rng.integers(low, vocab_size, size=int(rng.integers(3, 9)))
        phrases.append(phrase[phrase != eod_id])
    successor = rng.permutation(n_phrases)

    docs, produced = [], 0
    while produced < n_tokens:
        n = int(rng.integers(8, 48))
        current = int(rng.integers(n_phrases))
        parts = []
        for _ in range(n):
            parts.append(phrases[current])
            current = int(successor[current]) if rng.random() < follow_prob else int(rng.integers(n_phrases))
        doc = np.concatenate(parts + [np.array([eod_id])]).astype('<u4')
        docs.append(doc)
        produced += doc.size
    return docs


def make_synthetic_corpus(out_dir, n_tokens, seed=0, n_shards=1, dataset='synthetic'):
    """
    Write a byte-vocabulary synthetic corpus and its manifest.

    Returns:
        Path: manifest path
    """
    out_dir = Path(out_dir)
    tok = ByteTokenizer()
    docs = synthetic_documents(n_tokens, tok.vocab_size, tok.eod_id, seed)
    names = []
    for i, part in enumerate(np.array_split(np.arange(len(docs)), n_shards)):
        shard = TokenShard.from_documents([docs[j] for j in part], tok.vocab_size, tok.eod_id, tok.fingerprint)
        name = f"{dataset}_{i:03d}.bin"
        write_shard(shard, out_dir / name)
        names.append(name)
    manifest = CorpusManifest(
        dataset=dataset,
        tokenizer=TokenizerDescriptor(name=tok.name, vocab_size=tok.vocab_size, eod_id=tok.eod_id,
                                      fingerprint=tok.fingerprint),
        shards=names,
    )
    path = write_manifest(manifest, out_dir / 'corpus.json')
    logger.info(f"Synthetic corpus '{dataset}' with {sum(d.size for d in docs)} tokens written to {out_dir}")
    return path
