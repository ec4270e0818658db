"""
Learning-rate schedules: warmup-stable-decay (trapezoid) and cosine.

Schedules are pure functions of (spec, iteration), so pausing and resuming
training never changes the lr sequence.
"""

import logging
import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError

from config import Config
from errors import ScheduleError

logger = logging.getLogger(__name__)

COOLDOWN_FRACTION = 0.2


class ScheduleSpec(BaseModel):
    """LR schedule kind and geometry, in iterations."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal['wsd', 'cosine'] = 'wsd'
    peak_lr: float
    warmup_iters: int
    total_iters: int
    cooldown_iters: int = 0
    min_lr_fraction: float = Config.COSINE_MIN_LR_FRACTION

    @classmethod
    def from_dict(cls, data):
        try:
            spec = cls(**data)
        except ValidationError as e:
            raise ScheduleError(f"invalid schedule spec: {e}") from e
        return spec.check()

    def check(self):
        if self.peak_lr <= 0:
            raise ScheduleError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.total_iters < 0 or self.warmup_iters < 0 or self.cooldown_iters < 0:
            raise ScheduleError("iteration counts must be non-negative")
        if self.kind == 'wsd' and self.warmup_iters + self.cooldown_iters > self.total_iters:
            raise ScheduleError(
                f"warmup ({self.warmup_iters}) + cooldown ({self.cooldown_iters}) exceeds "
                f"total iterations ({self.total_iters})"
            )
        if self.kind == 'cosine':
            if self.warmup_iters > self.total_iters:
                raise ScheduleError(f"warmup ({self.warmup_iters}) exceeds total ({self.total_iters})")
            if not 0.0 <= self.min_lr_fraction <= 1.0:
                raise ScheduleError(f"min_lr_fraction must lie in [0, 1], got {self.min_lr_fraction}")
        return self

    @property
    def stable_end(self):
        """First iteration of the cooldown (wsd)."""
        return self.total_iters - self.cooldown_iters

    @property
    def is_reference_cooldown(self):
        return self.kind == 'wsd' and self.cooldown_iters == math.floor(COOLDOWN_FRACTION * self.total_iters)


def lr_at(spec, iteration):
    """
    Learning rate at an iteration.

    wsd: linear 0 -> peak over warmup, constant peak, linear peak -> 0 over
    the final cooldown_iters. cosine: linear warmup, then cosine decay to
    min_lr_fraction * peak at total_iters.
    """
    if not 0 <= iteration <= spec.total_iters:
        raise ScheduleError(f"iteration {iteration} outside [0, {spec.total_iters}]")
    peak = spec.peak_lr
    if iteration < spec.warmup_iters:
        return peak * iteration / spec.warmup_iters
    if spec.kind == 'wsd':
        if iteration <= spec.stable_end:
            return peak
        return peak * (spec.total_iters - iteration) / spec.cooldown_iters
    decay_iters = spec.total_iters - spec.warmup_iters
    if decay_iters == 0:
        return peak
    progress = (iteration - spec.warmup_iters) / decay_iters
    floor = spec.min_lr_fraction * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_curve(spec, stride=1):
    """(iteration, lr) pairs covering [0, total_iters]."""
    points = [(i, lr_at(spec, i)) for i in range(0, spec.total_iters + 1, stride)]
    if points[-1][0] != spec.total_iters:
        points.append((spec.total_iters, lr_at(spec, spec.total_iters)))
    return points


def iterations_for_budget(token_budget, global_batch_tokens):
    """ceil(tokens / batch tokens), in exact integer arithmetic."""
    token_budget = int(round(token_budget))
    global_batch_tokens = int(global_batch_tokens)
    if token_budget <= 0 or global_batch_tokens <= 0:
        raise ScheduleError("token budget and global batch tokens must be positive")
    return -(-token_budget // global_batch_tokens)


def cooldown_for_total(total_iters):
    """floor(0.2 * total) without float rounding."""
    return total_iters // 5


def plan_from_budget(token_budget, global_batch_tokens, peak_lr, warmup_iters, kind='wsd',
                     min_lr_fraction=Config.COSINE_MIN_LR_FRACTION):
    """
    Turn a token budget into a schedule spec.

    Args:
        token_budget: Training tokens D
        global_batch_tokens: Exact tokens per iteration (never a rounded label)
        peak_lr: Peak learning rate
        warmup_iters: Linear warmup length
        kind: 'wsd' or 'cosine'

    Returns:
        ScheduleSpec
    """
    total = iterations_for_budget(token_budget, global_batch_tokens)
    if warmup_iters >= total:
        raise ScheduleError(f"warmup ({warmup_iters}) must be shorter than total iterations ({total})")
    cooldown = cooldown_for_total(total) if kind == 'wsd' else 0
    spec = ScheduleSpec(kind=kind, peak_lr=peak_lr, warmup_iters=warmup_iters, total_iters=total,
                        cooldown_iters=cooldown, min_lr_fraction=min_lr_fraction).check()
    logger.info(f"Planned {kind} schedule: {total} iterations, warmup {warmup_iters}, cooldown {cooldown}")
    return spec


def cooldown_branch(spec, branch_iteration):
    """
    Derive an annealed branch from a stable-phase iteration of a wsd run.

    The branch keeps peak and warmup, stays constant up to branch_iteration
    and then cools down over 20% of its own total T, where T is the smallest
    integer with T - floor(0.2 * T) == branch_iteration. Branching at a
    plan's stable end reproduces that plan's total and cooldown.
    """
    if spec.kind != 'wsd':
        raise ScheduleError("cooldown branches need a wsd schedule")
    if branch_iteration < spec.warmup_iters:
        raise ScheduleError(f"branch iteration {branch_iteration} lies inside warmup (< {spec.warmup_iters})")
    if branch_iteration > spec.stable_end:
        raise ScheduleError(f"branch iteration {branch_iteration} lies inside cooldown (> {spec.stable_end})")
    total = (5 * branch_iteration) // 4
    while total - cooldown_for_total(total) < branch_iteration:
        total += 1
    while total > 0 and (total - 1) - cooldown_for_total(total - 1) == branch_iteration:
        total -= 1
    # total - cooldown == branch_iteration >= warmup, so the branch is always valid
    cooldown = cooldown_for_total(total)
    branch = spec.model_copy(update={'total_iters': total, 'cooldown_iters': cooldown})
    return branch.check()
