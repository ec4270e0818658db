"""
Tokenizer abstraction. BPE is never reimplemented here: real corpora use
the GPT-NeoX-20B tokenizer through the `tokenizers` package, toy fixtures
use a byte-level vocabulary.
"""

import hashlib
import logging

from errors import ConfigError

logger = logging.getLogger(__name__)

NEOX_PADDED_VOCAB = 50304


class ByteTokenizer:
    """UTF-8 bytes as token ids; id 0 doubles as the end-of-document token."""

    name = 'bytes'
    vocab_size = 256
    eod_id = 0

    def encode(self, text):
        return list(text.encode('utf-8'))

    def decode(self, ids):
        return bytes(i for i in ids if i != self.eod_id).decode('utf-8', errors='replace')

    @property
    def fingerprint(self):
        return hashlib.sha256(f"{self.name}:{self.vocab_size}:{self.eod_id}".encode()).hexdigest()


class HFTokenizer:
    """
    Wraps a `tokenizer.json` (e.g. GPT-NeoX-20B) with its vocabulary padded
    to a multiple suitable for the model (50,304 for NeoX).
    """

    def __init__(self, path, padded_vocab=NEOX_PADDED_VOCAB, eod_token='<|endoftext|>'):
        try:
            from tokenizers import Tokenizer
        except ImportError as e:
            raise ConfigError("loading a tokenizer.json needs the 'tokenizers' package") from e
        self.path = str(path)
        self._tok = Tokenizer.from_file(self.path)
        self.name = f"hf:{self.path}"
        raw_vocab = self._tok.get_vocab_size()
        if raw_vocab > padded_vocab:
            raise ConfigError(f"tokenizer vocab {raw_vocab} exceeds padded vocab {padded_vocab}")
        self.vocab_size = padded_vocab
        eod = self._tok.token_to_id(eod_token)
        if eod is None:
            raise ConfigError(f"tokenizer has no end-of-document token {eod_token!r}")
        self.eod_id = eod
        with open(self.path, 'rb') as f:
            self._fingerprint = hashlib.sha256(f.read()).hexdigest()
        logger.info(f"Loaded tokenizer {self.path}: {raw_vocab} ids padded to {padded_vocab}")

    def encode(self, text):
        return self._tok.encode(text).ids

    def decode(self, ids):
        return self._tok.decode([i for i in ids if i != self.eod_id])

    @property
    def fingerprint(self):
        return self._fingerprint


def load_tokenizer(spec):
    """'bytes' or a path to a tokenizer.json."""
    if spec in (None, 'bytes'):
        return ByteTokenizer()
    return HFTokenizer(spec)
