"""
RunPoint records: one evaluated model placed on the compute axis.

Compute is always recomputed as 6ND. A transcribed compute value is kept as
compute_reported for display only.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, computed_field, model_validator

from compare.ledger import total_compute
from config import Config
from errors import ComparisonError

logger = logging.getLogger(__name__)


def tokens_label(tokens):
    """300e9 -> '300B', 1e12 -> '1T'"""
    if tokens is None:
        return '?'
    for unit, scale in (('T', 1e12), ('B', 1e9), ('M', 1e6)):
        if tokens >= scale:
            return f"{tokens / scale:g}{unit}"
    return f"{tokens:g}"


class RunPoint(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    model: str
    procedure: str
    dataset: Optional[str] = None
    params: Optional[float] = None
    tokens: Optional[float] = None
    scores: Dict[str, float] = {}
    average_reported: Optional[float] = None
    # False when the reported average covers tasks not listed in scores
    scores_complete: bool = True
    compute_reported: Optional[float] = None
    provenance: Literal['internal', 'external'] = 'internal'

    @model_validator(mode='before')
    @classmethod
    def _absorb_derived(cls, data):
        # Serialised points carry the derived columns; they are never trusted.
        if isinstance(data, dict):
            data = dict(data)
            claimed = data.pop('compute', None)
            if data.get('compute_reported') is None and claimed is not None:
                data['compute_reported'] = claimed
            average = data.pop('average', None)
            if data.get('average_reported') is None and average is not None and not data.get('scores'):
                data['average_reported'] = average
        return data

    @model_validator(mode='after')
    def _consistent(self):
        for name in ('params', 'tokens'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if not self.scores and self.average_reported is None:
            raise ValueError("a point needs per-task scores or a reported average")
        if self.scores and self.scores_complete and self.average_reported is not None:
            mean = sum(self.scores.values()) / len(self.scores)
            if abs(mean - self.average_reported) > Config.AVERAGE_TOLERANCE + 1e-9:
                raise ValueError(
                    f"reported average {self.average_reported} differs from task mean {mean:.4f} "
                    f"by more than {Config.AVERAGE_TOLERANCE}"
                )
        return self

    @computed_field
    @property
    def compute(self) -> Optional[float]:
        if self.params is None or self.tokens is None:
            return None
        return total_compute(self.params, self.tokens)

    @computed_field
    @property
    def average(self) -> float:
        if self.average_reported is not None:
            return self.average_reported
        return sum(self.scores.values()) / len(self.scores)

    @property
    def task_mean(self):
        if not self.scores:
            return None
        return sum(self.scores.values()) / len(self.scores)

    @property
    def label(self):
        parts = [p for p in (self.dataset, tokens_label(self.tokens)) if p]
        return f"{self.model} ({', '.join(parts)})"

    @property
    def series_label(self):
        return f"{self.procedure}/{self.dataset}" if self.dataset else self.procedure


def load_points(path):
    """
    Read RunPoint JSONL.

    Raises:
        ComparisonError: listing every malformed record with its line number
    """
    path = Path(path)
    if not path.exists():
        raise ComparisonError(f"point file not found: {path}")
    points, problems = [], []
    for lineno, line in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1):
        if not line.strip():
            continue
        try:
            points.append(RunPoint(**json.loads(line)))
        except json.JSONDecodeError as e:
            problems.append(f"{path}:{lineno}: invalid JSON: {e.msg}")
        except ValidationError as e:
            problems.append(f"{path}:{lineno}: " + "; ".join(err["msg"] for err in e.errors()))
        except TypeError as e:
            problems.append(f"{path}:{lineno}: {e}")
    if problems:
        raise ComparisonError("malformed run points:\n" + "\n".join(problems))
    logger.info(f"Loaded {len(points)} run points from {path}")
    return points


def load_many(paths):
    points = []
    for path in paths:
        points.extend(load_points(path))
    if not points:
        raise ComparisonError("no run points in the given files")
    return points


def save_points(points, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for p in points:
            f.write(json.dumps(p.model_dump(), sort_keys=True) + '\n')
    return path
