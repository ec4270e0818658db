"""
Dataset rankings, cross-scale rank consistency and compute dominance.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import networkx as nx
import numpy as np
import pandas as pd
from scipy.stats import kendalltau

from compare.points import tokens_label
from config import Config
from errors import ComparisonError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankEntry:
    rank: int
    dataset: str
    average: float


@dataclass
class Ranking:
    scale: str
    entries: List[RankEntry]
    ties: List[Tuple[str, str]] = field(default_factory=list)
    near_ties: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def order(self):
        return [e.dataset for e in self.entries]

    def frame(self):
        near = {d for pair in self.near_ties for d in pair}
        tied = {d for pair in self.ties for d in pair}
        return pd.DataFrame([{
            'scale': self.scale,
            'rank': e.rank,
            'dataset': e.dataset,
            'average': e.average,
            'tie': 'tie' if e.dataset in tied else ('near-tie' if e.dataset in near else ''),
        } for e in self.entries])


def scale_label(point):
    return f"{point.params / 1e9:.2g}B@{tokens_label(point.tokens)}"


def check_same_scale(points, tolerance=None):
    tolerance = Config.SCALE_PARAM_TOLERANCE if tolerance is None else tolerance
    reference = points[0]
    for p in points[1:]:
        if p.tokens != reference.tokens:
            raise ComparisonError(
                f"mixed token budgets: {p.label} vs {reference.label}"
            )
        if abs(p.params - reference.params) > tolerance * reference.params:
            raise ComparisonError(
                f"params of {p.label} differ from {reference.label} by more than {tolerance:.0%}"
            )


def rank_datasets(points, resolution=None, tolerance=None):
    """
    Rank the datasets of same-scale points by average, best first.

    Equal averages are ordered by dataset name and reported as ties;
    neighbours closer than the resolution are reported as near-ties.

    Raises:
        ComparisonError: empty input, mixed scales, or a dataset listed twice
    """
    resolution = Config.NEAR_TIE_RESOLUTION if resolution is None else resolution
    if not points:
        raise ComparisonError("nothing to rank")
    check_same_scale(points, tolerance)
    names = [p.dataset or p.model for p in points]
    if len(set(names)) != len(names):
        raise ComparisonError(f"dataset listed twice at one scale: {sorted(names)}")

    ordered = sorted(zip(names, [p.average for p in points]), key=lambda t: (-t[1], t[0]))
    entries = [RankEntry(rank=i + 1, dataset=n, average=a) for i, (n, a) in enumerate(ordered)]
    ties, near_ties = [], []
    for a, b in zip(entries, entries[1:]):
        gap = a.average - b.average
        if gap == 0:
            ties.append((a.dataset, b.dataset))
        elif gap <= resolution + 1e-12:
            near_ties.append((a.dataset, b.dataset))
    ranking = Ranking(scale=scale_label(points[0]), entries=entries, ties=ties, near_ties=near_ties)
    logger.info(f"Ranking at {ranking.scale}: {' > '.join(ranking.order)}")
    return ranking


def rankings_by_scale(points, provenance='internal'):
    """Group points with datasets into same-(params, tokens) rankings."""
    groups = {}
    for p in points:
        if p.dataset is None or not p.params or not p.tokens:
            continue
        if provenance and p.provenance != provenance:
            continue
        groups.setdefault((p.tokens, float(f"{p.params:.2g}")), []).append(p)
    return [rank_datasets(g) for _, g in sorted(groups.items())]


def rank_consistency(rankings):
    """
    Pairwise Kendall tau between rankings of one dataset set.

    Returns:
        tuple: (pandas DataFrame tau matrix indexed by scale, minimum tau)
    """
    if len(rankings) < 2:
        raise ComparisonError("rank consistency needs at least 2 rankings")
    datasets = sorted(rankings[0].order)
    for r in rankings[1:]:
        if sorted(r.order) != datasets:
            raise ComparisonError(
                f"rankings cover different datasets: {rankings[0].scale} vs {r.scale}"
            )
    if len(datasets) < 2:
        raise ComparisonError(f"rank consistency needs at least 2 datasets per ranking, got {datasets}")
    positions = [[r.order.index(d) for d in datasets] for r in rankings]
    labels = [r.scale for r in rankings]
    matrix = pd.DataFrame(np.ones((len(rankings), len(rankings))), index=labels, columns=labels)
    for i, j in itertools.combinations(range(len(rankings)), 2):
        tau, _ = kendalltau(positions[i], positions[j])
        matrix.iloc[i, j] = matrix.iloc[j, i] = float(tau)
    return matrix, float(matrix.values.min())


def dominates(a, b):
    """a reaches at least b's average with at most b's compute, strictly better in one"""
    if a.compute is None or b.compute is None:
        return False
    no_worse = a.compute <= b.compute and a.average >= b.average
    strictly = a.compute < b.compute or a.average > b.average
    return no_worse and strictly


def dominance_graph(points):
    """DiGraph over point labels with an edge dominator -> dominated."""
    G = nx.DiGraph()
    for p in points:
        G.add_node(p.label, compute=p.compute, average=p.average, provenance=p.provenance)
    for a, b in itertools.permutations(points, 2):
        if dominates(a, b):
            G.add_edge(a.label, b.label)
    return G


@dataclass
class DominanceReport:
    point: str
    compute: float
    average: float
    dominators: List[str]

    @property
    def flagged(self):
        return bool(self.dominators)


def flag_suboptimal(point, all_points):
    """
    Report every point that reaches the same or better average with the same
    or less compute.
    """
    dominators = sorted((p for p in all_points if p is not point and dominates(p, point)),
                        key=lambda p: (p.compute, -p.average, p.label))
    report = DominanceReport(point=point.label, compute=point.compute, average=point.average,
                             dominators=[p.label for p in dominators])
    if report.flagged:
        logger.info(f"{point.label} is compute-dominated by {len(dominators)} point(s)")
    return report


def flag_all(points):
    return [flag_suboptimal(p, points) for p in points]


def leaderboard(points):
    """All points sorted by average, best first; equal averages by label."""
    rows = sorted(points, key=lambda p: (-p.average, p.label))
    return pd.DataFrame([{
        'model': p.model,
        'dataset': p.dataset or '--',
        'tokens': p.tokens,
        'params': p.params,
        'compute': p.compute,
        'average': p.average,
        'provenance': p.provenance,
        **p.scores,
    } for p in rows])
