import random

import pytest

from errors import ConfigError, ScheduleError
from refmodel.schedule import (ScheduleSpec, cooldown_branch, iterations_for_budget, lr_at, lr_curve,
                               plan_from_budget)

# (tokens, global batch tokens, warmup, total, cooldown)
PLANS = [
    (300e9, 4_128_768, 25_000, 72_661, 14_532),
    (1e12, 4_128_768, 25_000, 242_204, 48_440),
    (50e9, 2_654_208, 5_000, 18_839, 3_767),
    (50e9, 4_194_304, 5_000, 11_921, 2_384),
    (300e9, 2_097_152, 5_000, 143_052, 28_610),
]


@pytest.mark.parametrize('tokens,gbs,warmup,total,cooldown', PLANS)
def test_plan_from_budget(tokens, gbs, warmup, total, cooldown):
    spec = plan_from_budget(tokens, gbs, peak_lr=4e-3, warmup_iters=warmup)
    assert spec.total_iters == total
    assert spec.cooldown_iters == cooldown
    assert spec.is_reference_cooldown


def test_cosine_plan_has_no_cooldown():
    spec = plan_from_budget(50e9, 4_030_464, peak_lr=4e-3, warmup_iters=1_000, kind='cosine')
    assert spec.total_iters == 12_406
    assert spec.cooldown_iters == 0


def test_iterations_round_up():
    assert iterations_for_budget(10, 4) == 3
    assert iterations_for_budget(8, 4) == 2
    with pytest.raises(ScheduleError):
        iterations_for_budget(0, 4)


@pytest.mark.parametrize('branch,total,cooldown', [
    (58_129, 72_661, 14_532),
    (193_764, 242_204, 48_440),
    (25_000, 31_249, 6_249),
])
def test_cooldown_branch(branch, total, cooldown):
    parent = plan_from_budget(1e12, 4_128_768, peak_lr=4e-3, warmup_iters=25_000)
    child = cooldown_branch(parent, branch)
    assert (child.total_iters, child.cooldown_iters) == (total, cooldown)
    assert child.stable_end == branch
    assert child.peak_lr == parent.peak_lr and child.warmup_iters == parent.warmup_iters
    assert lr_at(child, branch) == parent.peak_lr
    assert lr_at(child, child.total_iters) == 0.0


def test_cooldown_branch_rejects_warmup_and_cooldown_iterations():
    parent = plan_from_budget(300e9, 4_128_768, peak_lr=4e-3, warmup_iters=25_000)
    with pytest.raises(ScheduleError):
        cooldown_branch(parent, 24_999)
    with pytest.raises(ScheduleError):
        cooldown_branch(parent, parent.stable_end + 1)


def test_wsd_shape():
    spec = ScheduleSpec.from_dict({'peak_lr': 1e-3, 'warmup_iters': 10, 'total_iters': 100, 'cooldown_iters': 20})
    assert lr_at(spec, 0) == 0.0
    assert lr_at(spec, 5) == pytest.approx(5e-4)
    assert lr_at(spec, 10) == 1e-3
    assert lr_at(spec, 80) == 1e-3
    assert lr_at(spec, 90) == pytest.approx(5e-4)
    assert lr_at(spec, 100) == 0.0
    lrs = [lr for _, lr in lr_curve(spec)]
    assert max(lrs) == 1e-3 and min(lrs) >= 0.0


def test_cosine_shape():
    spec = ScheduleSpec.from_dict({'kind': 'cosine', 'peak_lr': 1e-3, 'warmup_iters': 10, 'total_iters': 110,
                                   'min_lr_fraction': 0.1})
    assert lr_at(spec, 10) == pytest.approx(1e-3)
    assert lr_at(spec, 60) == pytest.approx(0.55e-3)
    assert lr_at(spec, 110) == pytest.approx(1e-4)
    lrs = [lr for _, lr in lr_curve(spec)[10:]]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_lr_curve_is_a_pure_function_of_iteration():
    spec = plan_from_budget(50e9, 4_194_304, peak_lr=4e-3, warmup_iters=5_000)
    curve = dict(lr_curve(spec, stride=97))
    assert curve[spec.total_iters] == 0.0
    for i in (0, 97, 4_947, 9_506):
        assert curve[i] == lr_at(spec, i)


def test_invalid_geometry():
    with pytest.raises(ScheduleError, match='exceeds total'):
        ScheduleSpec.from_dict({'peak_lr': 1e-3, 'warmup_iters': 60, 'total_iters': 100, 'cooldown_iters': 50})
    with pytest.raises(ConfigError):
        ScheduleSpec.from_dict({'peak_lr': -1, 'warmup_iters': 0, 'total_iters': 10})
    spec = ScheduleSpec.from_dict({'peak_lr': 1e-3, 'warmup_iters': 0, 'total_iters': 10, 'cooldown_iters': 2})
    with pytest.raises(ScheduleError):
        lr_at(spec, 11)
    with pytest.raises(ScheduleError):
        plan_from_budget(1e6, 1e6, peak_lr=1e-3, warmup_iters=5)


def test_wsd_piecewise_invariants_on_sampled_iterations():
    spec = plan_from_budget(1e12, 4_128_768, peak_lr=4e-3, warmup_iters=25_000)
    rng = random.Random(0)
    for i in sorted(rng.randrange(0, spec.total_iters + 1) for _ in range(10_000)):
        lr = lr_at(spec, i)
        assert 0.0 <= lr <= spec.peak_lr
        if i <= spec.warmup_iters:
            assert lr == pytest.approx(spec.peak_lr * i / spec.warmup_iters)
        elif i <= spec.stable_end:
            assert lr == spec.peak_lr
        else:
            assert lr == pytest.approx(spec.peak_lr * (spec.total_iters - i) / spec.cooldown_iters)
