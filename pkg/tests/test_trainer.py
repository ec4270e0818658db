import json
import math

import pytest
import torch

from corpus.packing import BatchStream
from corpus.shards import TokenShard
from corpus.synthetic import synthetic_documents
from corpus.tokenizer import ByteTokenizer
from errors import CheckpointError, ConfigError, DataError, TrainingAborted
from evals.tasks import make_synthetic_task
from refmodel.model import PRESETS, build, count_params
from refmodel import trainer
from refmodel.schedule import ScheduleSpec
from refmodel.trainer import (CheckpointPolicy, OptimConfig, accumulate_gradients, checkpoint_name, deserialize_state,
                              init_state, load_checkpoint, run_ablation, save_checkpoint, serialize_state, train,
                              train_step, write_ablation_report)

TOK = ByteTokenizer()
CONTEXT = 16
BATCH_TOKENS = 64


@pytest.fixture(scope='module')
def shard():
    return TokenShard.from_documents(synthetic_documents(8_000, seed=0), TOK.vocab_size, TOK.eod_id, TOK.fingerprint)


def _stream(shard, context=CONTEXT, batch_tokens=BATCH_TOKENS, seed=0):
    return BatchStream([shard], context, batch_tokens, seed)


def _config(dropout_p=0.1):
    return PRESETS['toy'].ablated(context_length=CONTEXT, dropout_p=dropout_p)


def _schedule(total=20, warmup=2, cooldown=4, peak_lr=3e-3):
    return ScheduleSpec(peak_lr=peak_lr, warmup_iters=warmup, total_iters=total, cooldown_iters=cooldown).check()


def _same_params(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


@pytest.mark.slow
def test_toy_run_reduces_loss_by_one_nat(shard):
    config = PRESETS['toy'].ablated(context_length=32)
    schedule = _schedule(total=200, warmup=10, cooldown=40, peak_lr=1e-2)
    state, _ = train(config, schedule, _stream(shard, 32, 512), seed=0)
    initial = state.loss_history[0]
    final = sum(state.loss_history[-10:]) / 10
    assert initial == pytest.approx(math.log(256), abs=0.3)
    assert final < initial - 1.0


def test_state_counters_and_log(shard, tmp_path):
    log = tmp_path / 'train_log.jsonl'
    state, saved = train(_config(), _schedule(total=6), _stream(shard), seed=0, log_path=log,
                         policy=CheckpointPolicy(output_dir=str(tmp_path), every=3))
    assert state.iteration == 6
    assert state.tokens_seen == 6 * BATCH_TOKENS
    assert [p.name for p in saved] == [checkpoint_name(3), checkpoint_name(6)]
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r['iteration'] for r in records] == list(range(1, 7))
    assert set(records[0]) == {'iteration', 'lr', 'loss', 'grad_norm', 'tokens_seen', 'wall_ms'}
    assert records[0]['lr'] == 0.0


class FailingStream(BatchStream):
    def batch_at(self, iteration):
        if iteration == 2:
            raise DataError("shard went missing")
        return super().batch_at(iteration)


def test_log_file_is_closed_when_training_fails(shard, tmp_path, monkeypatch):
    opened = []

    def tracking_open(*args, **kwargs):
        f = open(*args, **kwargs)
        opened.append(f)
        return f

    monkeypatch.setattr(trainer, 'open', tracking_open, raising=False)
    log = tmp_path / 'train_log.jsonl'
    with pytest.raises(DataError, match='shard went missing'):
        train(_config(), _schedule(total=6), FailingStream([shard], CONTEXT, BATCH_TOKENS, 0), seed=0,
              log_path=log, prefetch_depth=0)
    assert len(opened) == 1 and opened[0].closed
    assert [json.loads(line)['iteration'] for line in log.read_text().splitlines()] == [1, 2]


def test_loader_depth_does_not_change_the_run(shard):
    a, _ = train(_config(), _schedule(total=6), _stream(shard), seed=2, prefetch_depth=0)
    b, _ = train(_config(), _schedule(total=6), _stream(shard), seed=2, prefetch_depth=3)
    assert a.loss_history == b.loss_history
    assert _same_params(a.model, b.model)


def test_training_is_deterministic(shard):
    a, _ = train(_config(), _schedule(total=8), _stream(shard), seed=3)
    b, _ = train(_config(), _schedule(total=8), _stream(shard), seed=3)
    assert a.loss_history == b.loss_history
    assert _same_params(a.model, b.model)


def test_resume_reproduces_uninterrupted_run(shard, tmp_path):
    config, schedule = _config(), _schedule(total=20)
    full, _ = train(config, schedule, _stream(shard), seed=1)

    policy = CheckpointPolicy(output_dir=str(tmp_path), every=10)
    _, saved = train(config, schedule, _stream(shard), policy=policy, seed=1, stop_at=10)
    assert saved[-1].name == checkpoint_name(10)
    resumed_state = load_checkpoint(saved[-1])
    assert resumed_state.iteration == 10
    resumed, _ = train(config, schedule, _stream(shard), seed=1, resume=resumed_state)

    assert resumed.loss_history == full.loss_history
    assert _same_params(resumed.model, full.model)


def test_zero_iteration_run_checkpoint_equals_initialisation(shard, tmp_path):
    config = _config()
    schedule = ScheduleSpec(peak_lr=1e-3, warmup_iters=0, total_iters=0, cooldown_iters=0)
    state, saved = train(config, schedule, _stream(shard), seed=4,
                         policy=CheckpointPolicy(output_dir=str(tmp_path)))
    assert [p.name for p in saved] == [checkpoint_name(0)]
    loaded = load_checkpoint(saved[0])
    assert _same_params(loaded.model, build(config, seed=4))
    assert loaded.tokens_seen == 0 and loaded.loss_history == []


def test_checkpoint_round_trip_is_bit_identical(shard, tmp_path):
    state, _ = train(_config(), _schedule(total=100, warmup=5, cooldown=20), _stream(shard), seed=0)
    assert state.model.output_head_weight is state.model.embedding.weight
    data = serialize_state(state)
    back = deserialize_state(data)
    assert serialize_state(back) == data
    assert back.model.output_head_weight is back.model.embedding.weight
    for p in back.model.parameters():
        s = back.optimizer.state[p]
        assert set(s) == {'step', 'exp_avg', 'exp_avg_sq'}
        assert float(s['step']) == 100


def test_truncated_checkpoint_is_rejected(shard, tmp_path):
    state, _ = train(_config(), _schedule(total=2), _stream(shard), seed=0)
    path = save_checkpoint(state, tmp_path / 'ckpt.osr')
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match='CRC'):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'missing.osr')


def test_mismatched_config_names_first_tensor(shard, tmp_path):
    state, _ = train(_config(), _schedule(total=1, warmup=0, cooldown=0), _stream(shard), seed=0)
    path = save_checkpoint(state, tmp_path / 'ckpt.osr')
    with pytest.raises(ConfigError, match='layers.0.ffn.gate.weight'):
        load_checkpoint(path, _config().ablated(ffn_hidden=64))
    with pytest.raises(ConfigError, match='layers.0.attn.qkv.bias'):
        load_checkpoint(path, _config().ablated(biases_enabled=False))


def test_zero_lr_step_leaves_parameters_unchanged(shard):
    # first warmup iteration runs at lr 0
    config = _config()
    state, _ = train(config, _schedule(total=10, warmup=5), _stream(shard), seed=2, stop_at=1,
                     optim_config=OptimConfig(weight_decay=0.5))
    assert state.iteration == 1
    assert _same_params(state.model, build(config, seed=2))


def test_clipping_bounds_global_norm(shard):
    config = _config(dropout_p=0.0)
    optim = OptimConfig(grad_clip=0.01)
    state = init_state(config, _schedule(), optim, BATCH_TOKENS, seed=0)
    state.iteration = 5
    _, _, pre_clip = train_step(state, _stream(shard).batch_at(0))
    post_clip = torch.sqrt(sum(p.grad.pow(2).sum() for p in state.model.parameters())).item()
    assert pre_clip > 0.01
    assert post_clip <= 0.01 + 1e-6


def test_accumulated_and_monolithic_gradients_match(shard):
    config = _config(dropout_p=0.0)
    batch = _stream(shard).batch_at(0)
    whole, parts = build(config, seed=0), build(config, seed=0)
    loss_whole = accumulate_gradients(whole, batch)
    loss_parts = accumulate_gradients(parts, batch, micro_batch_sequences=1)
    assert loss_parts == pytest.approx(loss_whole, abs=1e-6)
    for a, b in zip(whole.parameters(), parts.parameters()):
        assert torch.allclose(a.grad, b.grad, atol=1e-6, rtol=1e-4)


def test_micro_batch_must_divide_batch(shard):
    with pytest.raises(ConfigError):
        accumulate_gradients(build(_config(), 0), _stream(shard).batch_at(0), micro_batch_sequences=3)


def test_non_finite_forward_aborts_with_diagnostics(shard):
    state = init_state(_config(), _schedule(), OptimConfig(), BATCH_TOKENS, seed=0)
    state.iteration = 3
    with torch.no_grad():
        state.model.embedding.weight[:] = float('nan')
    with pytest.raises(TrainingAborted) as e:
        train_step(state, _stream(shard).batch_at(0))
    assert e.value.iteration == 3
    assert e.value.lr == 3e-3
    assert 'embedding_lookup' in str(e.value)


def test_ablation_arms_are_deterministic(shard, tmp_path):
    config = _config()
    schedule = _schedule(total=4, warmup=1, cooldown=1)
    tasks = [make_synthetic_task('words', n_items=6, seed=0)]

    def run():
        return run_ablation(config, schedule, lambda: _stream(shard), tasks, 'synthetic',
                            flags=('qk_norm', 'dropout'), seed=0)

    first, second = run(), run()
    assert [a.name for a in first] == ['baseline', 'no_qk_norm', 'no_dropout']
    assert [a.loss_history for a in first] == [a.loss_history for a in second]
    baseline, no_qk = first[0], first[1]
    assert baseline.run_point.params - no_qk.run_point.params == 2 * config.head_dim * config.layers
    assert baseline.run_point.params == sum(count_params(config))
    assert baseline.run_point.tokens == 4 * BATCH_TOKENS

    out = write_ablation_report(first, tmp_path / 'ablation')
    assert (out / 'ablation_curves.csv').read_text().startswith('arm,iteration,loss')
    assert len((out / 'ablation_points.jsonl').read_text().splitlines()) == 3
    assert 'no_dropout' in (out / 'ablation_summary.md').read_text()


def test_unknown_ablation_flag(shard):
    with pytest.raises(ConfigError):
        run_ablation(_config(), _schedule(), lambda: _stream(shard), [make_synthetic_task('t', 2)], 'x',
                     flags=('layernorm',))
