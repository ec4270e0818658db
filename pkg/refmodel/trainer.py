"""
Deterministic single-process training loop.

Each step: forward, loss, backward (optionally accumulated over
micro-batches), global-norm clipping, AdamW update at lr_at(iteration) with
decoupled weight decay. (seed, configs, corpus) fully determine every
checkpoint, and resuming from any checkpoint reproduces the uninterrupted
run bit-exactly.
"""

import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import torch
from pydantic import BaseModel, ConfigDict

from config import Config
from corpus.packing import batch_loader
from errors import CheckpointError, ConfigError, NumericFault, TrainingAborted
from refmodel import checkpoint as ckpt
from refmodel.model import Model, ModelConfig, build, loss, total_params
from refmodel.numerics import set_determinism
from refmodel.schedule import ScheduleSpec, lr_at

logger = logging.getLogger(__name__)


class OptimConfig(BaseModel):
    """AdamW settings; only weight decay is stated by the reference recipe."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    weight_decay: float = Config.WEIGHT_DECAY
    betas: Tuple[float, float] = Config.ADAM_BETAS
    eps: float = Config.ADAM_EPS
    grad_clip: float = Config.GRAD_CLIP
    micro_batch_sequences: Optional[int] = None


class CheckpointPolicy(BaseModel):
    """Save every `every` iterations (default: 10% of total) plus the final state."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    output_dir: Optional[str] = None
    every: Optional[int] = None
    fraction: float = Config.CHECKPOINT_FRACTION

    def interval(self, total_iters):
        if self.every is not None:
            return max(1, self.every)
        return max(1, int(total_iters * self.fraction))


@dataclass
class TrainState:
    model_config: ModelConfig
    schedule: ScheduleSpec
    optim_config: OptimConfig
    global_batch_tokens: int
    seed: int
    model: Model
    optimizer: torch.optim.Optimizer
    rng_state: torch.Tensor
    iteration: int = 0
    tokens_seen: int = 0
    loss_history: List[float] = field(default_factory=list)

    def meta(self):
        return {
            'format': 'osref-checkpoint',
            'model_config': self.model_config.model_dump(mode='json'),
            'schedule': self.schedule.model_dump(mode='json'),
            'optim_config': self.optim_config.model_dump(mode='json'),
            'global_batch_tokens': self.global_batch_tokens,
            'seed': self.seed,
            'iteration': self.iteration,
            'tokens_seen': self.tokens_seen,
            'loss_history': list(self.loss_history),
        }


def param_groups(model, weight_decay):
    """Matrices (embedding included) are decayed; biases and norm scales are not."""
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [
        {'params': decay, 'weight_decay': weight_decay},
        {'params': no_decay, 'weight_decay': 0.0},
    ]


def make_optimizer(model, optim_config):
    return torch.optim.AdamW(
        param_groups(model, optim_config.weight_decay),
        lr=0.0,
        betas=optim_config.betas,
        eps=optim_config.eps,
        foreach=False,
    )


def init_state(model_config, schedule, optim_config, global_batch_tokens, seed, threads=1):
    set_determinism(seed, threads)
    model = build(model_config, seed)
    optimizer = make_optimizer(model, optim_config)
    # dropout draws from a stream seeded independently of initialisation
    torch.manual_seed(seed)
    return TrainState(model_config=model_config, schedule=schedule, optim_config=optim_config,
                      global_batch_tokens=global_batch_tokens, seed=seed, model=model,
                      optimizer=optimizer, rng_state=torch.get_rng_state())


def state_tensors(state):
    tensors = {}
    named = state.model.named_tensors()
    for name, p in named.items():
        tensors[f'model/{name}'] = p
    for name, p in named.items():
        s = state.optimizer.state.get(p)
        if s:
            tensors[f'optim/exp_avg/{name}'] = s['exp_avg']
            tensors[f'optim/exp_avg_sq/{name}'] = s['exp_avg_sq']
            tensors[f'optim/step/{name}'] = torch.as_tensor(s['step'], dtype=torch.float32).reshape(())
    tensors['rng/torch'] = state.rng_state
    return tensors


def serialize_state(state):
    return ckpt.encode(state.meta(), state_tensors(state))


def save_checkpoint(state, path):
    """Write a TrainState atomically; returns the path."""
    path = ckpt.write_atomic(path, serialize_state(state))
    logger.info(f"Saved checkpoint {path} at iteration {state.iteration}")
    return path


def deserialize_state(data, source='<bytes>', model_config=None):
    meta, tensors = ckpt.decode(data, source=source)
    if meta.get('format') != 'osref-checkpoint':
        raise CheckpointError(f"{source}: not a training checkpoint")
    stored_config = ModelConfig.from_dict(meta['model_config'])
    config = model_config or stored_config
    config.check()
    model = Model(config)
    ckpt.load_model_tensors(model, tensors)
    optim_config = OptimConfig(**meta['optim_config'])
    optimizer = make_optimizer(model, optim_config)
    for name, p in model.named_tensors().items():
        key = f'optim/exp_avg/{name}'
        if key in tensors:
            optimizer.state[p] = {
                'step': tensors[f'optim/step/{name}'].clone(),
                'exp_avg': tensors[key].to(p.dtype).clone(),
                'exp_avg_sq': tensors[f'optim/exp_avg_sq/{name}'].to(p.dtype).clone(),
            }
    return TrainState(
        model_config=config,
        schedule=ScheduleSpec.from_dict(meta['schedule']),
        optim_config=optim_config,
        global_batch_tokens=meta['global_batch_tokens'],
        seed=meta['seed'],
        model=model,
        optimizer=optimizer,
        rng_state=tensors['rng/torch'].clone(),
        iteration=meta['iteration'],
        tokens_seen=meta['tokens_seen'],
        loss_history=list(meta['loss_history']),
    )


def load_checkpoint(path, model_config=None):
    """
    Read a TrainState back.

    Args:
        path: Checkpoint file
        model_config: Optional config to load into; a mismatch raises
            ConfigError naming the first mismatched tensor

    Raises:
        CheckpointError: version/CRC mismatch or unreadable file
    """
    return deserialize_state(ckpt.read_bytes(path), source=str(path), model_config=model_config)


def load_model(path):
    """Model only, in eval mode, for evaluation."""
    state = load_checkpoint(path)
    state.model.eval()
    return state.model, state


def checkpoint_name(iteration):
    return f"ckpt_{iteration:07d}.osr"


def _micro_batches(batch, micro):
    n = batch.inputs.shape[0]
    step = n if not micro else micro
    if n % step != 0:
        raise ConfigError(f"micro_batch_sequences ({step}) must divide sequences per batch ({n})")
    for start in range(0, n, step):
        yield batch.inputs[start:start + step], batch.targets[start:start + step]


def accumulate_gradients(model, batch, micro_batch_sequences=None):
    """
    Backward over a global batch, optionally in micro-batches.

    Micro-batch losses are weighted by their token share, so accumulated
    and monolithic batches give the same gradient up to summation order.

    Returns:
        float: mean loss over the batch
    """
    total_tokens = batch.targets.numel()
    batch_loss = 0.0
    for inputs, targets in _micro_batches(batch, micro_batch_sequences):
        micro_loss = loss(model(inputs), targets) * (targets.numel() / total_tokens)
        micro_loss.backward()
        batch_loss += micro_loss.item()
    return batch_loss


def train_step(state, batch):
    """One optimizer step; returns (loss, lr, grad_norm)."""
    model, optimizer = state.model, state.optimizer
    lr = lr_at(state.schedule, state.iteration)
    for group in optimizer.param_groups:
        group['lr'] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    try:
        batch_loss = accumulate_gradients(model, batch, state.optim_config.micro_batch_sequences)
    except NumericFault as e:
        raise TrainingAborted(state.iteration, lr, float('nan'), str(e)) from e
    if not math.isfinite(batch_loss):
        raise TrainingAborted(state.iteration, lr, float('nan'), f"non-finite loss {batch_loss}")
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), state.optim_config.grad_clip,
                                               foreach=False).item()
    if not math.isfinite(grad_norm):
        raise TrainingAborted(state.iteration, lr, grad_norm, "non-finite gradient norm")
    optimizer.step()
    return batch_loss, lr, grad_norm


def train(model_config, schedule, stream, optim_config=None, policy=None, seed=0, resume=None,
          log_path=None, stop_at=None, threads=1, prefetch_depth=2):
    """
    Run (or resume) a training run to schedule.total_iters.

    Args:
        model_config: ModelConfig
        schedule: ScheduleSpec
        stream: BatchStream (seekable, deterministic)
        optim_config: OptimConfig
        policy: CheckpointPolicy; output_dir None disables checkpoint files
        seed: The run's single randomness source
        resume: Optional TrainState to continue from
        log_path: JSONL file receiving one record per iteration
        stop_at: Optional iteration to stop early at (an interruption)
        threads: CPU threads; reruns are bit-identical for equal values
        prefetch_depth: Batches prepared ahead by the loader worker (0 builds them in-process)

    Returns:
        tuple: (final TrainState, list of checkpoint paths)
    """
    optim_config = optim_config or OptimConfig()
    policy = policy or CheckpointPolicy()
    if resume is None:
        state = init_state(model_config, schedule, optim_config, stream.global_batch_tokens, seed, threads)
    else:
        state = resume
        if state.global_batch_tokens != stream.global_batch_tokens:
            raise ConfigError("resumed state and data stream disagree on global batch tokens")
        set_determinism(state.seed, threads)
        torch.set_rng_state(state.rng_state)
        logger.info(f"Resuming at iteration {state.iteration} ({state.tokens_seen} tokens seen)")

    end = schedule.total_iters if stop_at is None else min(stop_at, schedule.total_iters)
    interval = policy.interval(schedule.total_iters)
    out_dir = Path(policy.output_dir) if policy.output_dir else None
    saved = []
    logger.info(
        f"Training {total_params(model_config):,} params for {schedule.total_iters} iterations "
        f"({schedule.kind}, peak lr {schedule.peak_lr})"
    )
    batches = batch_loader(stream, start=state.iteration, stop=end, depth=prefetch_depth)
    try:
        with (open(log_path, 'a') if log_path else nullcontext()) as log_file:
            started = time.perf_counter()
            for batch in batches:
                step_loss, lr, grad_norm = train_step(state, batch)
                state.iteration += 1
                state.tokens_seen += state.global_batch_tokens
                state.loss_history.append(step_loss)
                state.rng_state = torch.get_rng_state()
                if log_file:
                    record = {'iteration': state.iteration, 'lr': lr, 'loss': step_loss, 'grad_norm': grad_norm,
                              'tokens_seen': state.tokens_seen,
                              'wall_ms': round((time.perf_counter() - started) * 1000, 3)}
                    log_file.write(json.dumps(record) + '\n')
                    log_file.flush()
                if out_dir and state.iteration % interval == 0:
                    saved.append(save_checkpoint(state, out_dir / checkpoint_name(state.iteration)))
                if state.iteration % 50 == 0:
                    logger.info(f"iter {state.iteration}/{schedule.total_iters} loss {step_loss:.4f} lr {lr:.3e}")
                started = time.perf_counter()
        final = out_dir / checkpoint_name(state.iteration) if out_dir else None
        if final is not None and (not saved or saved[-1] != final):
            saved.append(save_checkpoint(state, final))
    except TrainingAborted as e:
        logger.error(f"{e}")
        raise
    return state, saved


@dataclass
class AblationArm:
    name: str
    model_config: ModelConfig
    loss_history: List[float]
    run_point: object
    records: list


ABLATION_FLAGS = {
    'biases': ('no_biases', {'biases_enabled': False}),
    'qk_norm': ('no_qk_norm', {'qk_norm_enabled': False}),
    'dropout': ('no_dropout', {'dropout_p': 0.0}),
}


def run_ablation(model_config, schedule, make_stream, tasks, dataset, flags=('biases', 'qk_norm', 'dropout'),
                 optim_config=None, seed=0, threads=1, tokenizer=None):
    """
    Train a baseline arm plus one arm per disabled feature, same seed and data.

    Args:
        make_stream: Zero-argument callable returning a fresh BatchStream
        tasks: EvalTasks scored on every arm's final model
        dataset: Dataset label for the emitted RunPoints
        flags: Subset of 'biases', 'qk_norm', 'dropout'

    Returns:
        list: AblationArm per arm, baseline first
    """
    from compare.points import RunPoint
    from evals.harness import evaluate

    unknown = set(flags) - set(ABLATION_FLAGS)
    if unknown:
        raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
    if not tasks:
        raise ConfigError("ablation needs at least one eval task for its run points")
    arms = [('baseline', model_config)]
    arms += [(ABLATION_FLAGS[f][0], model_config.ablated(**ABLATION_FLAGS[f][1])) for f in flags]

    results = []
    for name, config in arms:
        logger.info(f"Ablation arm '{name}'")
        state, _ = train(config, schedule, make_stream(), optim_config, seed=seed, threads=threads)
        state.model.eval()
        records = [evaluate(state.model, task, seed, tokenizer=tokenizer, run_id=name) for task in tasks]
        point = RunPoint(
            model=f"{config.name or 'custom'}-{name}",
            procedure=f"ablation-{name}",
            dataset=dataset,
            params=total_params(config),
            tokens=state.tokens_seen,
            scores={r.task: r.accuracy for r in records},
            provenance='internal',
        )
        results.append(AblationArm(name=name, model_config=config, loss_history=state.loss_history,
                                   run_point=point, records=records))
    return results


def write_ablation_report(arms, out_dir):
    """CSV loss curves, RunPoint JSONL and a Markdown summary."""
    import pandas as pd

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = pd.DataFrame(
        [{'arm': a.name, 'iteration': i + 1, 'loss': l} for a in arms for i, l in enumerate(a.loss_history)]
    )
    curves.to_csv(out_dir / 'ablation_curves.csv', index=False)
    with open(out_dir / 'ablation_points.jsonl', 'w') as f:
        for a in arms:
            f.write(a.run_point.model_dump_json() + '\n')
    summary = pd.DataFrame([{
        'arm': a.name,
        'params': a.run_point.params,
        'final_loss': round(a.loss_history[-1], 4) if a.loss_history else None,
        'average': round(a.run_point.average, 4),
    } for a in arms])
    (out_dir / 'ablation_summary.md').write_text(summary.to_markdown(index=False) + '\n')
    logger.info(f"Ablation report written to {out_dir}")
    return out_dir
