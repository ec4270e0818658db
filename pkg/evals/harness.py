"""
Log-likelihood multiple-choice evaluation.

Each choice is scored as the summed log-probability of its continuation
tokens given the (few-shot) context; the argmax choice is compared to gold.
Ties go to the lowest choice index.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from pydantic import BaseModel

from corpus.tokenizer import ByteTokenizer
from errors import DataError
from refmodel import numerics as nx

logger = logging.getLogger(__name__)


class ItemTooLong(DataError):
    """The continuation cannot fit in the context window"""


class EvalRecord(BaseModel):
    task: str
    accuracy: float
    n_items: int
    n_correct: int
    n_skipped: int = 0
    n_shots: int = 0
    scoring: str = 'raw_ll'
    choice_lls: List[Optional[List[float]]] = []
    # per-token scores, only filled under length_normalized scoring
    normalized_lls: List[Optional[List[float]]] = []
    run_id: Optional[str] = None
    tokens_seen: Optional[int] = None


@torch.no_grad()
def score_continuation(model, context_tokens, continuation_tokens, eod_id=0):
    """
    Sum of log p(continuation token | prefix) over the continuation.

    The context is truncated from the left when context + continuation
    exceeds the model's context length; an empty context is conditioned on
    the end-of-document token.

    Raises:
        DataError: empty continuation
        ItemTooLong: the continuation alone does not fit
    """
    continuation = list(continuation_tokens)
    if not continuation:
        raise DataError("empty continuation")
    context = list(context_tokens) or [eod_id]
    window = model.config.context_length
    # the final continuation token is only a target, never an input
    if len(continuation) > window:
        raise ItemTooLong(f"continuation of {len(continuation)} tokens exceeds context {window}")
    keep = window + 1 - len(continuation)
    context = context[-keep:]
    sequence = torch.tensor([context + continuation], dtype=torch.long)
    inputs, targets = sequence[:, :-1], sequence[:, 1:]
    logits = model(inputs)
    start = len(context) - 1
    logprobs = nx.log_softmax(logits[0, start:].double(), axis=-1)
    picked = logprobs.gather(-1, targets[0, start:].unsqueeze(-1)).squeeze(-1)
    return float(picked.sum())


def format_shots(task, shots):
    t = task.template
    blocks = [t.question.format(context=s.context) + t.answer.format(choice=s.choices[s.gold]) for s in shots]
    return t.separator.join(blocks) + (t.separator if blocks else '')


def sample_shots(task, index, seed):
    """Seeded shot selection; the scored item is never its own shot."""
    if task.n_shots == 0:
        return []
    rng = np.random.default_rng([seed, index])
    if task.pool:
        candidates = list(range(len(task.pool)))
        source = task.pool
    else:
        candidates = [i for i in range(len(task.items)) if i != index]
        source = task.items
    chosen = rng.choice(len(candidates), size=task.n_shots, replace=False)
    return [source[candidates[int(c)]] for c in chosen]


def _score_item(model, tokenizer, task, index, seed):
    item = task.items[index]
    shots = sample_shots(task, index, seed)
    prompt = format_shots(task, shots) + task.template.question.format(context=item.context)
    context_ids = tokenizer.encode(prompt)
    raw, normalized = [], []
    for choice in item.choices:
        cont_ids = tokenizer.encode(task.template.answer.format(choice=choice))
        ll = score_continuation(model, context_ids, cont_ids, eod_id=tokenizer.eod_id)
        raw.append(ll)
        normalized.append(ll / len(cont_ids))
    return raw, normalized


def pick_choice(scores):
    """argmax with ties broken toward the lowest index"""
    return int(np.argmax(np.asarray(scores)))


def evaluate(model, task, seed, tokenizer=None, run_id=None, workers=1):
    """
    Score every item of a task.

    Items whose continuation cannot fit the context are skipped and counted
    in n_skipped; accuracy is correct / scored items.

    Returns:
        EvalRecord
    """
    tokenizer = tokenizer or ByteTokenizer()
    model.eval()

    def run(index):
        try:
            return _score_item(model, tokenizer, task, index, seed)
        except ItemTooLong as e:
            logger.warning(f"{task.name}[{index}] skipped: {e}")
            return None

    indices = range(len(task.items))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_scores = list(pool.map(run, indices))
    else:
        all_scores = [run(i) for i in indices]

    normalize = task.scoring == 'length_normalized'
    correct = scored = skipped = 0
    for item, scores in zip(task.items, all_scores):
        if scores is None:
            skipped += 1
            continue
        raw, per_token = scores
        scored += 1
        correct += int(pick_choice(per_token if normalize else raw) == item.gold)
    if scored == 0:
        raise DataError(f"task '{task.name}': every item was skipped")
    record = EvalRecord(task=task.name, accuracy=correct / scored, n_items=scored, n_correct=correct,
                        n_skipped=skipped, n_shots=task.n_shots, scoring=task.scoring,
                        choice_lls=[None if s is None else s[0] for s in all_scores],
                        normalized_lls=([None if s is None else s[1] for s in all_scores] if normalize else []),
                        run_id=run_id)
    logger.info(f"{task.name}[{task.n_shots}]: accuracy {record.accuracy:.4f} on {scored} items ({skipped} skipped)")
    return record


def aggregate(records, task_weights=None):
    """
    Mean of per-task accuracies (weighted if task_weights is given).

    Raises:
        DataError: no records, duplicate task names, or a task without a weight
    """
    if not records:
        raise DataError("aggregate needs at least one record")
    names = [r.task for r in records]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise DataError(f"duplicate task names: {duplicates}")
    if task_weights is not None:
        missing = sorted(set(names) - set(task_weights))
        if missing:
            raise DataError(f"no weight given for tasks: {missing}")
    weights = np.array([1.0 if task_weights is None else float(task_weights[r.task]) for r in records])
    if weights.sum() <= 0:
        raise DataError("task weights sum to zero")
    accuracies = np.array([r.accuracy for r in records])
    return float((weights * accuracies).sum() / weights.sum())


def aggregate_record(records, run_id=None, heldout_loss=None):
    """Summary line for EvalRecord JSONL output."""
    summary = {'task': 'average', 'accuracy': aggregate(records), 'n_tasks': len(records),
               'tasks': {r.task: r.accuracy for r in records}, 'run_id': run_id}
    if heldout_loss is not None:
        summary['heldout_loss'] = heldout_loss
    return summary


def write_records(records, path, run_id=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for r in records:
            f.write(r.model_dump_json() + '\n')
        f.write(json.dumps(aggregate_record(records, run_id), sort_keys=True) + '\n')
    return path


def read_records(path):
    records = []
    with open(path) as f:
        for line in f:
            data = json.loads(line)
            if data.get('task') != 'average':
                records.append(EvalRecord(**data))
    return records


def task_scores(records) -> Dict[str, float]:
    return {r.task: r.accuracy for r in records}


def evaluate_checkpoints(checkpoint_dir, tasks, seed, tokenizer=None, workers=1, heldout=None):
    """
    Evaluate every checkpoint in a directory, in iteration order.

    Args:
        heldout: Optional held-out TokenShard; adds a heldout_loss column

    Returns:
        pandas.DataFrame: checkpoint, iteration, tokens_seen, average and one
        column per task
    """
    import pandas as pd

    from corpus.holdout import heldout_loss
    from refmodel.trainer import load_model

    paths = sorted(Path(checkpoint_dir).glob('ckpt_*.osr'))
    if not paths:
        raise DataError(f"no checkpoints in {checkpoint_dir}")
    rows = []
    for path in paths:
        model, state = load_model(path)
        records = [evaluate(model, task, seed, tokenizer=tokenizer, run_id=path.name, workers=workers)
                   for task in tasks]
        rows.append({'checkpoint': path.name, 'iteration': state.iteration, 'tokens_seen': state.tokens_seen,
                     'average': aggregate(records), **task_scores(records)})
        if heldout is not None:
            rows[-1]['heldout_loss'] = heldout_loss(model, heldout)
    return pd.DataFrame(rows).sort_values('iteration', kind='stable').reset_index(drop=True)
