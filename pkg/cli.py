"""
Command-line entry point.

    python cli.py <subcommand> [options]

Exit codes: 0 success, 1 runtime fault (training abort, numeric fault),
2 usage or validation error.
"""

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError

from config import get_config
from errors import ConfigError, NumericFault, OsrefError, TrainingAborted

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAULT, EXIT_USAGE = 0, 1, 2


class RunManifest(BaseModel):
    """
    A training run. `model` is a preset name or an inline ModelConfig dict;
    `corpus` is a corpus.json path relative to the manifest file.
    """
    model_config = ConfigDict(extra='forbid')

    run_id: str
    model: Union[str, dict]
    schedule: dict
    corpus: str
    seed: int = 0
    global_batch_tokens: int
    optim: dict = {}
    checkpoint_every: Optional[int] = None
    output_dir: Optional[str] = None
    threads: Optional[int] = None

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        try:
            return cls(**json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e.msg}") from e
        except ValidationError as e:
            raise ConfigError(f"{path}: {e}") from e

    def save(self, path):
        return atomic_write_text(path, self.model_dump_json(indent=2) + '\n')

    def model_settings(self):
        from refmodel.model import ModelConfig, get_preset
        if isinstance(self.model, str):
            return get_preset(self.model)
        data = dict(self.model)
        if 'preset' in data:
            return get_preset(data.pop('preset')).ablated(**data)
        return ModelConfig.from_dict(data)

    def schedule_spec(self):
        from refmodel.schedule import ScheduleSpec, plan_from_budget
        data = dict(self.schedule)
        if 'tokens' in data:
            return plan_from_budget(data['tokens'], self.global_batch_tokens, data['peak_lr'],
                                    data['warmup_iters'], kind=data.get('kind', 'wsd'),
                                    min_lr_fraction=data.get('min_lr_fraction', 0.1))
        return ScheduleSpec.from_dict(data)

    def corpus_path(self, manifest_path):
        return Path(manifest_path).parent / self.corpus


def output_root():
    return Path(get_config().OUTPUT_ROOT)


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def staging_dir(out_dir):
    """Temporary directory beside out_dir, so publishing is a same-filesystem rename."""
    parent = Path(out_dir).resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    return tempfile.TemporaryDirectory(dir=parent, prefix=".staging-")


def publish(files, out_dir):
    """Move finished files from a staging directory into out_dir, one rename each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    published = []
    for f in files:
        target = out_dir / Path(f).name
        os.replace(f, target)
        published.append(target)
    return published


def sci(x):
    """3.06e+21 -> 3.06e21; small integers stay plain."""
    text = f"{x:.3g}"
    if 'e' not in text:
        return text
    mantissa, exponent = text.split('e')
    return f"{mantissa}e{int(exponent)}"


# --------------------------
# Corpus commands
# --------------------------

def cmd_make_corpus(args):
    from corpus.synthetic import make_synthetic_corpus
    path = make_synthetic_corpus(args.out, args.tokens, seed=args.seed, n_shards=args.shards, dataset=args.dataset)
    print(path)
    return EXIT_OK


def cmd_inspect_shard(args):
    from corpus.shards import read_shard
    shard = read_shard(args.path)
    print(json.dumps({
        'path': str(args.path),
        'tokens': shard.token_count,
        'documents': len(shard.documents()),
        'vocab_size': shard.vocab_size,
        'eod_id': shard.eod_id,
        'fingerprint': shard.fingerprint,
    }, indent=2))
    return EXIT_OK


def cmd_split(args):
    from corpus.holdout import split_holdout
    from corpus.shards import read_shard, write_shard
    shard = read_shard(args.shard)
    train_part, test_part = split_holdout(shard, args.fraction, args.seed)
    stem = Path(args.shard).stem
    out = Path(args.out)
    write_shard(train_part, out / f"{stem}.train.bin")
    write_shard(test_part, out / f"{stem}.test.bin")
    print(out / f"{stem}.train.bin")
    print(out / f"{stem}.test.bin")
    return EXIT_OK


# --------------------------
# Training
# --------------------------

def _load_heldout(path):
    from corpus.shards import read_shard
    return read_shard(path) if path else None


def _append_record(path, record):
    with open(path, 'a') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')


def prepare_run(manifest_path, seed=None):
    """Validate manifest and corpus before anything is written."""
    from corpus.packing import BatchStream
    from corpus.shards import load_corpus

    manifest = RunManifest.load(manifest_path)
    if seed is not None:
        manifest = manifest.model_copy(update={'seed': seed})
    model_config = manifest.model_settings()
    schedule = manifest.schedule_spec()
    corpus = load_corpus(manifest.corpus_path(manifest_path))
    if corpus.tokenizer.vocab_size > model_config.vocab:
        raise ConfigError(
            f"corpus vocab {corpus.tokenizer.vocab_size} exceeds model vocab {model_config.vocab}"
        )
    stream = BatchStream(corpus.shards, model_config.context_length, manifest.global_batch_tokens, manifest.seed)
    return manifest, model_config, schedule, corpus, stream


def cmd_train(args):
    from refmodel.trainer import CheckpointPolicy, OptimConfig, load_checkpoint, train

    manifest, model_config, schedule, corpus, stream = prepare_run(args.manifest, args.seed)
    heldout = _load_heldout(args.heldout)
    if heldout is not None and heldout.vocab_size > model_config.vocab:
        raise ConfigError(f"held-out shard vocab {heldout.vocab_size} exceeds model vocab {model_config.vocab}")
    run_dir = Path(args.output_dir or manifest.output_dir or output_root() / manifest.run_id)
    if run_dir.exists() and any(run_dir.iterdir()) and not args.resume:
        raise ConfigError(f"run id '{manifest.run_id}' already used: {run_dir} is not empty")
    resume = load_checkpoint(args.resume, model_config) if args.resume else None
    optim_config = OptimConfig(**manifest.optim)
    threads = args.threads or manifest.threads or get_config().NUM_THREADS

    run_dir.mkdir(parents=True, exist_ok=True)
    manifest.save(run_dir / 'manifest.json')
    log_path = run_dir / 'train_log.jsonl'
    policy = CheckpointPolicy(output_dir=str(run_dir), every=manifest.checkpoint_every,
                              fraction=get_config().CHECKPOINT_FRACTION)
    try:
        state, saved = train(model_config, schedule, stream, optim_config, policy, seed=manifest.seed,
                             resume=resume, log_path=log_path, stop_at=args.stop_at, threads=threads)
    except (TrainingAborted, NumericFault) as e:
        _append_record(log_path, {'event': 'exit', 'status': 'aborted', 'exit_code': EXIT_FAULT, 'error': str(e)})
        raise
    except OsrefError as e:
        _append_record(log_path, {'event': 'exit', 'status': 'error', 'exit_code': EXIT_USAGE, 'error': str(e)})
        raise
    final_loss = state.loss_history[-1] if state.loss_history else None
    record = {'event': 'exit', 'status': 'ok', 'exit_code': EXIT_OK, 'iteration': state.iteration,
              'tokens_seen': state.tokens_seen, 'final_loss': final_loss,
              'checkpoint': saved[-1].name if saved else None}
    if heldout is not None:
        from corpus.holdout import heldout_loss
        record['heldout_loss'] = heldout_loss(state.model, heldout)
    _append_record(log_path, record)
    logger.info(f"Run '{manifest.run_id}' finished at iteration {state.iteration}; final loss {final_loss}")
    print(saved[-1] if saved else run_dir)
    return EXIT_OK


def cmd_ablate(args):
    from corpus.packing import BatchStream
    from evals.tasks import load_task
    from refmodel.trainer import OptimConfig, run_ablation, write_ablation_report
    from visualisation.plot import plot_loss_curves

    manifest, model_config, schedule, corpus, stream = prepare_run(args.manifest, args.seed)
    tasks = [load_task(p) for p in args.tasks]

    def make_stream():
        return BatchStream(corpus.shards, model_config.context_length, manifest.global_batch_tokens, manifest.seed)

    arms = run_ablation(model_config, schedule, make_stream, tasks, corpus.dataset, flags=args.flags,
                        optim_config=OptimConfig(**manifest.optim), seed=manifest.seed,
                        threads=args.threads or get_config().NUM_THREADS)
    out = Path(args.out or output_root() / f"{manifest.run_id}-ablation")
    with staging_dir(out) as staging:
        write_ablation_report(arms, staging)
        curves = pd.read_csv(Path(staging) / 'ablation_curves.csv')
        plot_loss_curves(curves, Path(staging) / 'ablation_curves.svg')
        publish(sorted(Path(staging).iterdir()), out)
    print(out)
    return EXIT_OK


# --------------------------
# Evaluation
# --------------------------

def _load_tasks(args):
    from evals.tasks import load_task
    tasks = [load_task(p) for p in args.tasks]
    if args.shots is not None or args.scoring:
        tasks = [t.with_overrides(n_shots=args.shots, scoring=args.scoring) for t in tasks]
    return tasks


def cmd_eval(args):
    from corpus.holdout import heldout_loss
    from corpus.tokenizer import load_tokenizer
    from evals.harness import aggregate_record, evaluate, evaluate_checkpoints
    from refmodel.trainer import load_model
    from visualisation.plot import plot_training_dynamics

    tasks = _load_tasks(args)
    heldout = _load_heldout(args.heldout)
    tokenizer = load_tokenizer(args.tokenizer)
    workers = args.workers or get_config().EVAL_WORKERS
    if args.checkpoint_dir:
        frame = evaluate_checkpoints(args.checkpoint_dir, tasks, args.seed, tokenizer=tokenizer, workers=workers,
                                     heldout=heldout)
        out = Path(args.out or Path(args.checkpoint_dir) / 'eval')
        with staging_dir(out) as staging:
            frame.to_csv(Path(staging) / 'training_dynamics.csv', index=False, float_format='%.6g')
            plot_training_dynamics(frame, Path(staging) / 'training_dynamics.svg')
            publish(sorted(Path(staging).iterdir()), out)
        print(out / 'training_dynamics.csv')
        return EXIT_OK

    model, state = load_model(args.checkpoint)
    run_id = Path(args.checkpoint).name
    records = [evaluate(model, t, args.seed, tokenizer=tokenizer, run_id=run_id, workers=workers) for t in tasks]
    for r in records:
        r.tokens_seen = state.tokens_seen
    lines = [r.model_dump_json() for r in records]
    loss = heldout_loss(model, heldout) if heldout is not None else None
    lines.append(json.dumps(aggregate_record(records, run_id, heldout_loss=loss), sort_keys=True))
    out = Path(args.out) if args.out else output_root() / 'eval' / f"{Path(args.checkpoint).stem}.jsonl"
    atomic_write_text(out, '\n'.join(lines) + '\n')
    print(out)
    return EXIT_OK


# --------------------------
# Ledger, schedule and comparison
# --------------------------

def cmd_ledger(args):
    from compare.ledger import compute_table, load_runs, runtime_table, to_markdown

    if args.table_file:
        frame = runtime_table(load_runs(args.table_file))
    else:
        if args.params is None or args.tokens is None:
            raise ConfigError("ledger needs PARAMS TOKENS or --table-file")
        if args.params <= 0 or args.tokens <= 0:
            raise ConfigError("params and tokens must be positive")
        frame = compute_table([(args.params, args.tokens)])
        print(sci(frame['total_flops'].iloc[0]))
    text = frame.to_csv(index=False, float_format='%.6g') if args.format == 'csv' else to_markdown(frame)
    if args.out:
        atomic_write_text(args.out, text)
    elif args.table_file or args.verbose:
        print(text, end='')
    return EXIT_OK


def cmd_schedule(args):
    from refmodel.schedule import ScheduleSpec, cooldown_branch, lr_curve, plan_from_budget

    kind = 'cosine' if args.cosine else 'wsd'
    if args.tokens is not None:
        if args.gbs is None:
            raise ConfigError("--tokens needs --gbs")
        spec = plan_from_budget(args.tokens, args.gbs, args.lr, args.warmup, kind=kind)
    elif args.total is not None:
        cooldown = args.cooldown if args.cooldown is not None else (args.total // 5 if kind == 'wsd' else 0)
        spec = ScheduleSpec.from_dict({'kind': kind, 'peak_lr': args.lr, 'warmup_iters': args.warmup,
                                       'total_iters': args.total, 'cooldown_iters': cooldown})
    else:
        raise ConfigError("schedule needs --tokens/--gbs or --total")
    if args.branch is not None:
        spec = cooldown_branch(spec, args.branch)
    print(f"total {spec.total_iters}, warmup {spec.warmup_iters}, cooldown {spec.cooldown_iters}")
    if args.out:
        frame = pd.DataFrame(lr_curve(spec, stride=args.stride), columns=['iteration', 'lr'])
        atomic_write_text(args.out, frame.to_csv(index=False, float_format='%.10g'))
    return EXIT_OK


def cmd_compare(args):
    from compare.points import load_many
    from compare.reports import REPORTS

    points = load_many(args.points)
    out = Path(args.out or output_root() / 'compare' / args.mode)
    with staging_dir(out) as staging:
        if args.mode == 'trend':
            files = REPORTS['trend'](points, staging, mode=args.trend_mode)
        else:
            files = REPORTS[args.mode](points, staging)
        published = publish(files, out)
    for path in published:
        print(path)
    return EXIT_OK


# --------------------------
# Argument parsing
# --------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='osref', description='Desk-scale reference pretraining and comparison')
    parser.add_argument('--log-level', default=None)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('make-corpus', help='write a synthetic corpus')
    p.add_argument('--out', required=True)
    p.add_argument('--tokens', type=int, default=5_000_000)
    p.add_argument('--shards', type=int, default=1)
    p.add_argument('--dataset', default='synthetic')
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser('inspect-shard', help='print a token shard header')
    p.add_argument('path')
    p.set_defaults(func=cmd_inspect_shard)

    p = sub.add_parser('split', help='document-level train/test split of a shard')
    p.add_argument('--shard', required=True)
    p.add_argument('--fraction', type=float, default=0.01)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser('train', help='train from a run manifest')
    p.add_argument('manifest')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--output-dir', default=None)
    p.add_argument('--resume', default=None, help='checkpoint to continue from')
    p.add_argument('--stop-at', type=int, default=None)
    p.add_argument('--threads', type=int, default=None)
    p.add_argument('--heldout', default=None, help='held-out shard scored after training')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('ablate', help='baseline vs feature-disabled arms')
    p.add_argument('manifest')
    p.add_argument('--tasks', nargs='+', required=True)
    p.add_argument('--flags', nargs='+', default=['biases', 'qk_norm', 'dropout'],
                   choices=['biases', 'qk_norm', 'dropout'])
    p.add_argument('--out', default=None)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--threads', type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('eval', help='log-likelihood multiple-choice evaluation')
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument('--checkpoint')
    target.add_argument('--checkpoint-dir')
    p.add_argument('--tasks', nargs='+', required=True)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--shots', type=int, default=None)
    p.add_argument('--scoring', choices=['raw_ll', 'length_normalized'], default=None)
    p.add_argument('--tokenizer', default='bytes')
    p.add_argument('--workers', type=int, default=None)
    p.add_argument('--heldout', default=None, help='held-out shard; adds heldout_loss to the output')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('ledger', help='6ND compute and run-time arithmetic')
    p.add_argument('params', type=float, nargs='?')
    p.add_argument('tokens', type=float, nargs='?')
    p.add_argument('--table-file', default=None)
    p.add_argument('--format', choices=['csv', 'markdown'], default='markdown')
    p.add_argument('--out', default=None)
    p.add_argument('--verbose', action='store_true')
    p.set_defaults(func=cmd_ledger)

    p = sub.add_parser('schedule', help='plan a schedule and export its lr curve')
    kind = p.add_mutually_exclusive_group()
    kind.add_argument('--wsd', action='store_true')
    kind.add_argument('--cosine', action='store_true')
    p.add_argument('--tokens', type=float, default=None)
    p.add_argument('--gbs', type=int, default=None)
    p.add_argument('--total', type=int, default=None)
    p.add_argument('--cooldown', type=int, default=None)
    p.add_argument('--lr', type=float, required=True)
    p.add_argument('--warmup', type=int, default=0)
    p.add_argument('--branch', type=int, default=None, help='derive a cooldown branch at this iteration')
    p.add_argument('--stride', type=int, default=1)
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser('compare', help='rank, trend and dominance reports from run points')
    p.add_argument('points', nargs='+')
    p.add_argument('--mode', choices=['rank', 'trend', 'flag'], default='rank')
    p.add_argument('--trend-mode', choices=['fit', 'connect'], default='fit')
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    try:
        config = get_config()
    except ConfigError as e:
        logger.error(f"{e}")
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level or config.LOG_LEVEL,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    try:
        return args.func(args)
    except (TrainingAborted, NumericFault) as e:
        logger.error(f"{e}")
        return EXIT_FAULT
    except (OsrefError, ValidationError) as e:
        logger.error(f"{e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
