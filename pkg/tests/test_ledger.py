from pathlib import Path

import pandas as pd
import pytest
from pydantic import ValidationError

from compare.ledger import (ComputeRecord, compute_table, flops_per_token, gpu_hours, load_runs, run_time_hours,
                            runtime_table, total_compute)
from compare.points import load_points
from errors import DataError

DATA = Path(__file__).resolve().parent.parent / 'compare' / 'data'


def test_flops_per_token():
    assert flops_per_token(0.13e9) == pytest.approx(7.8e8)
    assert flops_per_token(1.71e9) == pytest.approx(1.026e10)
    assert f"{flops_per_token(1.71e9):.2g}" == '1e+10'
    assert flops_per_token(1) == 6
    assert flops_per_token(3 * 0.4e9) == pytest.approx(3 * flops_per_token(0.4e9))


@pytest.mark.parametrize('params,tokens,expected', [
    (1.7e9, 300e9, 3.06e21),
    (1.7e9, 350e9, 3.57e21),
    (1.5e9, 18e12, 1.62e23),
])
def test_total_compute(params, tokens, expected):
    assert total_compute(params, tokens) == pytest.approx(expected, rel=1e-12)


def test_run_time_and_gpu_hours():
    assert run_time_hours(50e9, 252, 16_800) == pytest.approx(3.28, abs=0.01)
    assert run_time_hours(50e9, 84, 87_710) == pytest.approx(1.89, abs=0.01)
    assert run_time_hours(0, 84, 87_710) == 0
    assert gpu_hours(6.13, 64) == pytest.approx(393, abs=1)
    assert gpu_hours(5.48, 128) == pytest.approx(701, abs=1)
    assert gpu_hours(1, 1) == 1


def test_compute_record():
    record = ComputeRecord(params_total=1.7e9, tokens=300e9, throughput=14_490, gpu_count=252)
    assert record.total_flops == record.flops_per_token * record.tokens
    assert record.run_hours == pytest.approx(22.81, rel=0.01)
    assert ComputeRecord(params_total=1, tokens=1).run_hours is None
    with pytest.raises(ValidationError):
        ComputeRecord(params_total=-1, tokens=1)


def test_compute_table_columns():
    frame = compute_table([(1.7e9, 300e9), (0.13e9, 50e9)])
    assert list(frame.columns) == ['params', 'tokens', 'flops_per_token', 'total_flops', 'run_hours']
    assert frame['total_flops'].iloc[1] == pytest.approx(3.9e19)


@pytest.mark.parametrize('fixture', ['baseline_points.jsonl', 'leaderboard_points.jsonl'])
def test_reported_compute_cells_match_6nd(fixture):
    for point in load_points(DATA / fixture):
        assert f"{point.compute:.2g}" == f"{point.compute_reported:.2g}", point.label


def test_run_table_hours_within_one_percent():
    table = runtime_table(load_runs(DATA / 'cluster_runs.csv'))
    assert len(table) == 11
    for label in ('50B', '300B', '1T'):
        ratio = table[f'computed_hours_{label}'] / table[f'hours_{label}']
        assert ((ratio - 1).abs() <= 0.01).all(), label
    reported = table.dropna(subset=['gpu_hours_50B'])
    assert list(reported['machine']) == ['JEDI', 'JEDI', 'JUPITER', 'JUWELS Booster']
    for label in ('50B', '300B', '1T'):
        ratio = reported[f'computed_gpu_hours_{label}'] / reported[f'gpu_hours_{label}']
        assert ((ratio - 1).abs() <= 0.01).all(), label


def test_run_time_scales_one_six_twenty():
    runs = load_runs(DATA / 'cluster_runs.csv')
    assert ((runs['hours_300B'] / runs['hours_50B'] / 6 - 1).abs() <= 0.01).all()
    assert ((runs['hours_1T'] / runs['hours_50B'] / 20 - 1).abs() <= 0.01).all()


def test_load_runs_errors(tmp_path):
    with pytest.raises(DataError, match='not found'):
        load_runs(tmp_path / 'none.csv')
    pd.DataFrame({'machine': ['x'], 'gpus': [1]}).to_csv(tmp_path / 'bad.csv', index=False)
    with pytest.raises(DataError, match='missing columns'):
        load_runs(tmp_path / 'bad.csv')
