"""Document-level train/test splits and held-out loss measurement."""

import logging

import torch
from sklearn.model_selection import train_test_split

from corpus.shards import TokenShard
from errors import DataError
from refmodel.model import loss

logger = logging.getLogger(__name__)


def split_holdout(shard, fraction, seed):
    """
    Split a shard into disjoint train/test shards at document granularity.

    Args:
        shard: TokenShard
        fraction: Test fraction in (0, 1); test gets ceil(fraction * documents)
        seed: Split seed

    Returns:
        tuple: (train_shard, test_shard), documents kept in original order
    """
    if not 0 < fraction < 1:
        raise DataError(f"holdout fraction must lie in (0, 1), got {fraction}")
    docs = shard.documents()
    try:
        train_idx, test_idx = train_test_split(list(range(len(docs))), test_size=fraction,
                                               random_state=seed, shuffle=True)
    except ValueError as e:
        raise DataError(f"holdout fraction {fraction} leaves one side empty for {len(docs)} documents") from e
    if not train_idx or not test_idx:
        raise DataError(f"holdout fraction {fraction} leaves one side empty for {len(docs)} documents")

    def subset(indices):
        return TokenShard.from_documents([docs[i] for i in sorted(indices)], shard.vocab_size,
                                         shard.eod_id, shard.fingerprint)

    logger.info(f"Split {len(docs)} documents into {len(train_idx)} train / {len(test_idx)} test")
    return subset(train_idx), subset(test_idx)


@torch.no_grad()
def heldout_loss(model, shard, context_length=None):
    """Mean next-token loss (nats) over the held-out shard, in non-overlapping windows."""
    ctx = context_length or model.config.context_length
    tokens = torch.from_numpy(shard.tokens.astype('int64'))
    if tokens.numel() < 2:
        raise DataError("held-out shard needs at least two tokens")
    if shard.vocab_size > model.config.vocab:
        raise DataError(f"held-out shard vocab {shard.vocab_size} exceeds model vocab {model.config.vocab}")
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for start in range(0, tokens.numel() - 1, ctx):
        window = tokens[start:start + ctx + 1]
        if window.numel() < 2:
            break
        inputs, targets = window[:-1].unsqueeze(0), window[1:].unsqueeze(0)
        n = targets.numel()
        total += loss(model(inputs), targets).item() * n
        count += n
    model.train(was_training)
    logger.info(f"Held-out loss {total / count:.4f} over {count} tokens")
    return total / count
