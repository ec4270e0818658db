"""
Compute accounting with the 6N rule.

N is total parameters (embedding + non-embedding). Measured TFLOPS figures
are carried as opaque observations and never recomputed.
"""

import logging
from pathlib import Path
from typing import Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from errors import DataError

logger = logging.getLogger(__name__)

TOKEN_BUDGETS = {'50B': 50e9, '300B': 300e9, '1T': 1e12}


def flops_per_token(n_params):
    return 6 * n_params


def total_compute(n_params, n_tokens):
    return flops_per_token(n_params) * n_tokens


def run_time_hours(n_tokens, gpu_count, tokens_per_gpu_s):
    if n_tokens == 0:
        return 0.0
    return n_tokens / (gpu_count * tokens_per_gpu_s) / 3600


def gpu_hours(run_hours, gpu_count):
    return run_hours * gpu_count


class ComputeRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    params_total: float
    tokens: float
    throughput: Optional[float] = None
    gpu_count: Optional[int] = None
    tflops_observed: Optional[float] = None

    @model_validator(mode='after')
    def _non_negative(self):
        for name in ('params_total', 'tokens', 'throughput', 'gpu_count', 'tflops_observed'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        return self

    @property
    def flops_per_token(self):
        return flops_per_token(self.params_total)

    @property
    def total_flops(self):
        return self.flops_per_token * self.tokens

    @property
    def run_hours(self):
        if self.throughput is None or self.gpu_count is None:
            return None
        return run_time_hours(self.tokens, self.gpu_count, self.throughput)

    def row(self):
        return {
            'params': self.params_total,
            'tokens': self.tokens,
            'flops_per_token': self.flops_per_token,
            'total_flops': self.total_flops,
            'run_hours': self.run_hours,
        }


def compute_table(pairs):
    """DataFrame of ledger rows for (N, D) pairs."""
    return pd.DataFrame([ComputeRecord(params_total=n, tokens=d).row() for n, d in pairs])


def load_runs(path):
    """
    Read a distributed-run table (machine, model_b, gpus, micro_bs,
    context_length, global_bs_samples, global_bs_tokens, tflops_per_gpu,
    tokens_per_gpu_s, hours_50B, hours_300B, hours_1T and optional
    gpu_hours_* columns).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"run table not found: {path}")
    runs = pd.read_csv(path)
    required = {'machine', 'model_b', 'gpus', 'tokens_per_gpu_s'}
    missing = required - set(runs.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return runs


def runtime_table(runs):
    """
    Recompute run hours and GPU hours per token budget from throughput and
    place them next to the reported values.
    """
    out = runs.copy()
    for label, tokens in TOKEN_BUDGETS.items():
        hours = [run_time_hours(tokens, g, t) for g, t in zip(runs['gpus'], runs['tokens_per_gpu_s'])]
        out[f'computed_hours_{label}'] = hours
        out[f'computed_gpu_hours_{label}'] = [gpu_hours(h, g) for h, g in zip(hours, runs['gpus'])]
    return out


def to_markdown(frame, floatfmt='.3g'):
    return frame.to_markdown(index=False, floatfmt=floatfmt) + '\n'
