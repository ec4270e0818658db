"""
Concatenate-and-chunk sequence packing.

All shards are concatenated into one cyclic token stream (documents already
end with EOD), cut into context-length chunks, and the chunks of each pass
are shuffled with a seed derived from (seed, pass). Cross-document attention
is not masked.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import DataLoader, IterableDataset

from corpus.shards import check_compatible
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    """inputs/targets are (sequences, context) int64; boundaries mark EOD positions in inputs."""
    inputs: torch.Tensor
    targets: torch.Tensor
    boundaries: torch.Tensor
    iteration: int

    @property
    def tokens(self):
        return self.inputs.numel()


class BatchStream:
    """
    Deterministic, seekable stream of packed batches.

    Every pass visits each chunk exactly once before any chunk repeats. The
    stream is a pure function of (shards, context, batch size, seed,
    iteration), so resuming only needs seek(iteration).
    """

    def __init__(self, shards, context_length, global_batch_tokens, seed):
        first = check_compatible(shards)
        if context_length <= 0 or global_batch_tokens <= 0:
            raise ConfigError("context length and global batch tokens must be positive")
        if global_batch_tokens % context_length != 0:
            raise ConfigError(
                f"global batch tokens ({global_batch_tokens}) must be divisible by context length ({context_length})"
            )
        self.stream = np.concatenate([s.tokens for s in shards]).astype(np.int64)
        if self.stream.size == 0:
            raise DataError("empty corpus: no tokens")
        self.eod_id = first.eod_id
        self.vocab_size = first.vocab_size
        self.context_length = context_length
        self.global_batch_tokens = global_batch_tokens
        self.sequences_per_batch = global_batch_tokens // context_length
        self.seed = seed
        self.chunks_per_pass = self.stream.size // context_length
        self.batches_per_pass = self.chunks_per_pass // self.sequences_per_batch
        if self.batches_per_pass == 0:
            raise DataError(
                f"corpus of {self.stream.size} tokens cannot fill one batch of {global_batch_tokens} tokens"
            )
        self._iteration = 0
        self._order_cache = {}
        logger.info(
            f"Packed {self.stream.size} tokens into {self.chunks_per_pass} chunks of {context_length}; "
            f"{self.batches_per_pass} batches per pass"
        )

    def _order(self, epoch):
        if epoch not in self._order_cache:
            rng = np.random.default_rng([self.seed, epoch])
            self._order_cache = {epoch: rng.permutation(self.chunks_per_pass)}
        return self._order_cache[epoch]

    def tokens_consumed(self, iterations):
        return iterations * self.global_batch_tokens

    def seek(self, iteration):
        if iteration < 0:
            raise ValueError(f"iteration must be non-negative, got {iteration}")
        self._iteration = iteration
        return self

    def batch_at(self, iteration):
        epoch, slot = divmod(iteration, self.batches_per_pass)
        order = self._order(epoch)
        chunk_ids = order[slot * self.sequences_per_batch:(slot + 1) * self.sequences_per_batch]
        ctx = self.context_length
        starts = chunk_ids * ctx
        # targets wrap to the stream start past the final token
        index = (starts[:, None] + np.arange(ctx + 1)[None, :]) % self.stream.size
        window = torch.from_numpy(self.stream[index])
        inputs, targets = window[:, :-1].contiguous(), window[:, 1:].contiguous()
        return Batch(inputs=inputs, targets=targets, boundaries=(inputs == self.eod_id), iteration=iteration)

    def __iter__(self):
        return self

    def __next__(self):
        batch = self.batch_at(self._iteration)
        self._iteration += 1
        return batch


def pack(shards, context_length, global_batch_tokens, seed):
    return BatchStream(shards, context_length, global_batch_tokens, seed)


class PackedBatches(IterableDataset):
    """Batches [start, stop) of a BatchStream; unbounded when stop is None."""

    def __init__(self, stream, start=0, stop=None):
        if start < 0:
            raise ValueError(f"start must be non-negative, got {start}")
        self.stream = stream
        self.start = start
        self.stop = stop

    def __iter__(self):
        iteration = self.start
        while self.stop is None or iteration < self.stop:
            yield self.stream.batch_at(iteration)
            iteration += 1


def batch_loader(stream, start=0, stop=None, depth=2):
    """
    DataLoader over PackedBatches, built `depth` batches ahead in one worker.

    A single worker keeps batch order identical to the stream; depth 0 builds
    batches in-process. The loader seeds from its own generator and leaves
    the global torch RNG untouched.
    """
    kwargs = {}
    if depth > 0:
        kwargs.update(num_workers=1, prefetch_factor=depth)
    return DataLoader(PackedBatches(stream, start, stop), batch_size=None,
                      generator=torch.Generator().manual_seed(stream.seed), **kwargs)
