"""
Multiple-choice task files.

JSONL schema. Line 1 is the task header:
    {"task": "copa", "n_shots": 0, "scoring": "raw_ll",
     "template": {"question": "{context}", "answer": " {choice}", "separator": "\\n\\n"}}
Every following line is an item:
    {"context": "...", "choices": ["...", "..."], "gold": 0, "pool": false}
Items with "pool": true only serve as few-shot examples.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from errors import TaskSchemaError

logger = logging.getLogger(__name__)


class Template(BaseModel):
    model_config = ConfigDict(extra='forbid')

    question: str = "Question: {context}\nAnswer:"
    answer: str = " {choice}"
    separator: str = "\n\n"


class TaskHeader(BaseModel):
    model_config = ConfigDict(extra='forbid')

    task: str
    n_shots: int = 0
    scoring: Literal['raw_ll', 'length_normalized'] = 'raw_ll'
    template: Template = Template()

    @model_validator(mode='after')
    def _non_negative_shots(self):
        if self.n_shots < 0:
            raise ValueError("n_shots must be non-negative")
        return self


class TaskItem(BaseModel):
    model_config = ConfigDict(extra='forbid')

    context: str
    choices: List[str]
    gold: int
    pool: bool = False

    @model_validator(mode='after')
    def _valid_choices(self):
        if len(self.choices) < 2:
            raise ValueError("an item needs at least 2 choices")
        if not 0 <= self.gold < len(self.choices):
            raise ValueError(f"gold index {self.gold} outside {len(self.choices)} choices")
        return self


@dataclass
class EvalTask:
    name: str
    items: List[TaskItem]
    pool: List[TaskItem]
    n_shots: int = 0
    scoring: str = 'raw_ll'
    template: Template = Template()
    path: Optional[str] = None

    @property
    def shots_from_items(self):
        return not self.pool

    @property
    def shot_capacity(self):
        """Most shots one item can draw; an item never serves as its own shot."""
        return len(self.pool) if self.pool else len(self.items) - 1

    def with_overrides(self, n_shots=None, scoring=None):
        """
        Copy with a different shot count or scoring rule.

        Raises:
            TaskSchemaError: n_shots is negative or exceeds the shot pool
        """
        n_shots = self.n_shots if n_shots is None else n_shots
        source = self.path or self.name
        if n_shots < 0:
            raise TaskSchemaError(source, 1, f"n_shots must be non-negative, got {n_shots}")
        if n_shots > self.shot_capacity:
            raise TaskSchemaError(source, 1, f"shot pool too small for n_shots={n_shots} "
                                             f"(at most {self.shot_capacity})")
        return EvalTask(name=self.name, items=self.items, pool=self.pool, n_shots=n_shots,
                        scoring=scoring or self.scoring, template=self.template, path=self.path)


def _parse(line, model, path, lineno):
    try:
        return model(**json.loads(line))
    except json.JSONDecodeError as e:
        raise TaskSchemaError(path, lineno, f"invalid JSON: {e.msg}") from e
    except (ValidationError, TypeError) as e:
        raise TaskSchemaError(path, lineno, str(e).replace('\n', ' ')) from e


def load_task(path):
    """
    Parse a task file.

    Raises:
        TaskSchemaError: carrying the offending line number
        DataError: the file is missing
    """
    path = Path(path)
    if not path.exists():
        raise TaskSchemaError(path, 0, "task file not found")
    lines = [(i, l) for i, l in enumerate(path.read_text(encoding='utf-8').splitlines(), start=1) if l.strip()]
    if not lines:
        raise TaskSchemaError(path, 1, "empty task file")
    header = _parse(lines[0][1], TaskHeader, path, lines[0][0])
    items, pool = [], []
    for lineno, line in lines[1:]:
        item = _parse(line, TaskItem, path, lineno)
        (pool if item.pool else items).append(item)
    if not items:
        raise TaskSchemaError(path, lines[-1][0], "task has no scored items")
    logger.info(f"Loaded task '{header.task}' from {path}: {len(items)} items, {len(pool)} pool items")
    task = EvalTask(name=header.task, items=items, pool=pool, scoring=header.scoring, template=header.template,
                    path=str(path))
    return task.with_overrides(n_shots=header.n_shots)


def write_task(task, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = TaskHeader(task=task.name, n_shots=task.n_shots, scoring=task.scoring, template=task.template)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(header.model_dump_json() + '\n')
        for item in task.pool + task.items:
            f.write(item.model_dump_json() + '\n')
    return path


WORDS = ["red", "blue", "green", "stone", "river", "cloud", "lamp", "field", "bird", "glass",
         "salt", "wind", "road", "seed", "snow", "iron", "moon", "leaf", "fire", "sand"]


def make_synthetic_task(name, n_items, n_choices=4, seed=0, n_shots=0, scoring='raw_ll', pool_size=0):
    """
    Fixture task of word-association items with equal-length choices.

    Gold indices are uniform over choices, so a model without signal scores
    1/n_choices in expectation.
    """
    rng = np.random.default_rng(seed)

    def item(pool):
        words = rng.choice(len(WORDS), size=n_choices, replace=False)
        gold = int(rng.integers(n_choices))
        cue = WORDS[int(words[gold])]
        return TaskItem(context=f"The word is {cue}. Repeat it:",
                        choices=[WORDS[int(w)] for w in words], gold=gold, pool=pool)

    pool = [item(True) for _ in range(pool_size)]
    items = [item(False) for _ in range(n_items)]
    return EvalTask(name=name, items=items, pool=pool, n_shots=n_shots, scoring=scoring)
