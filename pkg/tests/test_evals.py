import json
import math
import re
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

from compare.points import load_points
from corpus.tokenizer import ByteTokenizer
from errors import DataError, TaskSchemaError
from evals.harness import (EvalRecord, aggregate, evaluate, pick_choice, read_records, sample_shots,
                           score_continuation, write_records)
from evals.tasks import TaskItem, load_task, make_synthetic_task, write_task
from refmodel.model import build

DATA = Path(__file__).resolve().parent.parent
TOK = ByteTokenizer()


class UniformModel(torch.nn.Module):
    """Equal logits everywhere: every token costs ln V."""

    def __init__(self, vocab=256, context_length=256):
        super().__init__()
        self.config = SimpleNamespace(vocab=vocab, context_length=context_length)

    def forward(self, tokens):
        return torch.zeros(*tokens.shape, self.config.vocab)


class RepeatOracle(UniformModel):
    """Puts its mass on the next byte of ' <cue>' after the last 'Repeat it:' prompt."""

    def forward(self, tokens):
        logits = super().forward(tokens)
        for b in range(tokens.shape[0]):
            for t in range(tokens.shape[1]):
                text = TOK.decode(tokens[b, :t + 1].tolist())
                cues = re.findall(r"The word is (\w+)\. Repeat it:", text)
                if not cues:
                    continue
                target = ' ' + cues[-1]
                written = text[text.rfind('Repeat it:') + len('Repeat it:'):]
                if target.startswith(written) and len(written) < len(target):
                    logits[b, t, ord(target[len(written)])] = 10.0
        return logits


def test_uniform_model_scores_chance():
    task = make_synthetic_task('chance', n_items=1000, n_choices=4, seed=0)
    record = evaluate(UniformModel(), task, seed=0)
    assert record.n_items == 1000 and record.n_skipped == 0
    assert 0.21 <= record.accuracy <= 0.29


def test_oracle_scores_perfectly_with_shots():
    task = load_task(DATA / 'evals' / 'data' / 'word_repeat.jsonl')
    assert task.n_shots == 1 and len(task.pool) == 2 and len(task.items) == 8
    record = evaluate(RepeatOracle(), task, seed=0)
    assert record.accuracy == 1.0
    assert record.n_correct == 8 and record.n_shots == 1


def test_uniform_continuation_costs_three_log_vocab():
    ll = score_continuation(UniformModel(), TOK.encode("abc"), TOK.encode("xyz"))
    assert ll == pytest.approx(-3 * math.log(256), abs=1e-9)


def test_empty_context_conditions_on_eod():
    ll = score_continuation(UniformModel(), [], TOK.encode("a"))
    assert ll == pytest.approx(-math.log(256), abs=1e-9)
    with pytest.raises(DataError):
        score_continuation(UniformModel(), TOK.encode("a"), [])


def test_log_likelihood_concatenates(toy_config):
    model = build(toy_config, seed=0).eval()
    ctx, a, b = TOK.encode("The cat"), TOK.encode(" sat on"), TOK.encode(" the mat")
    whole = score_continuation(model, ctx, a + b)
    split = score_continuation(model, ctx, a) + score_continuation(model, ctx + a, b)
    assert whole == pytest.approx(split, abs=1e-5)


def test_long_context_is_truncated_from_the_left():
    model = UniformModel(context_length=8)
    ll = score_continuation(model, TOK.encode("x" * 50), TOK.encode("abc"))
    assert ll == pytest.approx(-3 * math.log(256), abs=1e-9)


def test_items_too_long_are_skipped_and_counted():
    task = make_synthetic_task('short', n_items=3, seed=0)
    task.items.append(TaskItem(context="q", choices=[" " + "a" * 20, " b"], gold=1))
    record = evaluate(UniformModel(context_length=8), task, seed=0)
    assert record.n_skipped == 1 and record.n_items == 3
    assert record.choice_lls[-1] is None


def test_every_item_skipped_is_an_error():
    task = make_synthetic_task('long', n_items=0, seed=0)
    task.items.append(TaskItem(context="q", choices=[" " + "a" * 20, " " + "b" * 20], gold=0))
    with pytest.raises(DataError, match='skipped'):
        evaluate(UniformModel(context_length=8), task, seed=0)


class PreferA(UniformModel):
    def forward(self, tokens):
        logits = super().forward(tokens)
        logits[..., ord('a')] = 5.0
        return logits


def test_length_normalization_changes_the_pick():
    item = TaskItem(context="q", choices=[" aaaaaaaa", " b"], gold=0)
    raw = make_synthetic_task('raw', n_items=0)
    raw.items.append(item)
    normalized = raw.with_overrides(scoring='length_normalized')
    raw_record = evaluate(PreferA(), raw, seed=0)
    assert raw_record.accuracy == 0.0 and raw_record.normalized_lls == []
    record = evaluate(PreferA(), normalized, seed=0)
    assert record.accuracy == 1.0
    # choice_lls stay the summed log-likelihoods; the per-token scores sit beside them
    assert record.choice_lls == raw_record.choice_lls
    lls, per_token = record.choice_lls[0], record.normalized_lls[0]
    lengths = [len(TOK.encode(raw.template.answer.format(choice=c))) for c in item.choices]
    assert per_token == pytest.approx([ll / n for ll, n in zip(lls, lengths)])
    assert pick_choice([-1.0, -1.0, -2.0]) == 0


def test_shot_sampling_is_seeded_and_excludes_the_item():
    task = make_synthetic_task('shots', n_items=12, seed=0, n_shots=3)
    for i in range(len(task.items)):
        shots = sample_shots(task, i, seed=5)
        assert len(shots) == 3
        assert all(s is not task.items[i] for s in shots)
        assert shots == sample_shots(task, i, seed=5)
    pooled = make_synthetic_task('pooled', n_items=4, seed=0, n_shots=2, pool_size=5)
    assert all(s.pool for s in sample_shots(pooled, 0, seed=0))


def test_shot_override_is_checked_against_the_pool():
    task = load_task(DATA / 'evals' / 'data' / 'word_repeat.jsonl')
    assert task.shot_capacity == 2
    assert task.with_overrides(n_shots=2).n_shots == 2
    with pytest.raises(TaskSchemaError, match='word_repeat.jsonl:1:'):
        task.with_overrides(n_shots=3)
    with pytest.raises(TaskSchemaError, match='non-negative'):
        task.with_overrides(n_shots=-1)
    unpooled = make_synthetic_task('unpooled', n_items=4, seed=0)
    assert unpooled.with_overrides(n_shots=3).n_shots == 3
    with pytest.raises(TaskSchemaError):
        unpooled.with_overrides(n_shots=4)


def test_evaluation_is_deterministic_across_workers(toy_config):
    model = build(toy_config, seed=0)
    task = make_synthetic_task('det', n_items=12, seed=2, n_shots=1)
    a = evaluate(model, task, seed=7)
    b = evaluate(model, task, seed=7, workers=4)
    assert a.choice_lls == b.choice_lls
    assert a.accuracy == b.accuracy


def test_aggregate_reproduces_reported_averages():
    points = load_points(DATA / 'compare' / 'data' / 'leaderboard_points.jsonl')
    for point in points:
        records = [EvalRecord(task=t, accuracy=s, n_items=100, n_correct=round(100 * s))
                   for t, s in point.scores.items()]
        assert len(records) == 11
        assert abs(aggregate(records) - point.average_reported) <= 0.005 + 1e-9


def test_aggregate_weights_and_errors():
    records = [EvalRecord(task='a', accuracy=0.5, n_items=2, n_correct=1),
               EvalRecord(task='b', accuracy=1.0, n_items=2, n_correct=2)]
    assert aggregate(records) == 0.75
    assert aggregate(records, task_weights={'a': 3, 'b': 1}) == pytest.approx(0.625)
    with pytest.raises(DataError, match=r"no weight given for tasks: \['b'\]"):
        aggregate(records, task_weights={'a': 1})
    with pytest.raises(DataError, match='duplicate'):
        aggregate(records + [records[0]])
    with pytest.raises(DataError):
        aggregate([])


def test_records_round_trip(tmp_path):
    records = [EvalRecord(task='a', accuracy=0.5, n_items=2, n_correct=1, run_id='r')]
    path = write_records(records, tmp_path / 'out.jsonl', run_id='r')
    lines = path.read_text().splitlines()
    assert json.loads(lines[-1])['task'] == 'average'
    assert read_records(path) == records


def test_task_file_round_trip(tmp_path):
    task = make_synthetic_task('rt', n_items=5, seed=0, n_shots=1, pool_size=2)
    back = load_task(write_task(task, tmp_path / 'rt.jsonl'))
    assert back.items == task.items and back.pool == task.pool and back.n_shots == 1


@pytest.mark.parametrize('lines,line', [
    (['{"task": "t"}', '{"context": "c", "choices": ["a", "b"], "gold": 5}'], 2),
    (['{"task": "t"}', '{"context": "c", "choices": ["a", "b"], "gold": 0}', 'not json'], 3),
    (['{"task": "t"}', '{"context": "c", "choices": ["a"], "gold": 0}'], 2),
    (['{"task": "t", "scoring": "median"}', '{"context": "c", "choices": ["a", "b"], "gold": 0}'], 1),
    (['{"task": "t", "n_shots": 4}', '{"context": "c", "choices": ["a", "b"], "gold": 0}'], 1),
])
def test_task_schema_errors_carry_line_numbers(tmp_path, lines, line):
    path = tmp_path / 'bad.jsonl'
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(TaskSchemaError) as e:
        load_task(path)
    assert e.value.line == line
    assert f"bad.jsonl:{line}:" in str(e.value)


def test_missing_task_file(tmp_path):
    with pytest.raises(TaskSchemaError, match='not found'):
        load_task(tmp_path / 'nope.jsonl')
