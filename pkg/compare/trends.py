"""
Compute-axis alignment and scaling-trend lines.

A trend is a least-squares line of average score against log10(compute)
over one procedure/dataset series. It is a guide through the points, not a
scaling law.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from errors import ComparisonError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScalingSeries:
    procedure: str
    dataset: Optional[str]
    points: tuple

    @property
    def label(self):
        return f"{self.procedure}/{self.dataset}" if self.dataset else self.procedure

    @property
    def computes(self):
        return [p.compute for p in self.points]

    @property
    def averages(self):
        return [p.average for p in self.points]


@dataclass(frozen=True)
class TrendFit:
    series: str
    slope: Optional[float]
    intercept: Optional[float]
    residuals: List[float] = field(default_factory=list)
    kind: str = 'trend'

    @property
    def fitted(self):
        return self.slope is not None

    def predict(self, compute):
        return self.slope * np.log10(compute) + self.intercept


@dataclass
class AlignmentReport:
    series: List[ScalingSeries]
    rejected: List[tuple]


def align_with_report(points):
    """
    Group points by (procedure, dataset) and order each group by compute.

    Points without params or tokens are rejected and reported, never
    silently dropped.

    Raises:
        ComparisonError: two points of one series share a compute value
    """
    groups, rejected = {}, []
    for p in points:
        if not p.params or not p.tokens:
            reason = "missing params" if not p.params else "missing tokens"
            logger.warning(f"Rejected point {p.label}: {reason}")
            rejected.append((p, reason))
            continue
        groups.setdefault((p.procedure, p.dataset or ''), []).append(p)

    series = []
    for (procedure, dataset), members in sorted(groups.items()):
        members = sorted(members, key=lambda p: (p.compute, p.model))
        for a, b in zip(members, members[1:]):
            if a.compute == b.compute:
                raise ComparisonError(
                    f"duplicate compute {a.compute:.3g} in series {procedure}/{dataset}: {a.label}, {b.label}"
                )
        series.append(ScalingSeries(procedure=procedure, dataset=dataset or None, points=tuple(members)))
    return AlignmentReport(series=series, rejected=rejected)


def align(points):
    return align_with_report(points).series


def fit_trend(series):
    """
    Least-squares line of average vs log10(compute).

    Series shorter than 2 points yield an unfitted TrendFit.
    """
    if len(series.points) < 2:
        return TrendFit(series=series.label, slope=None, intercept=None)
    x = np.log10(np.array(series.computes, dtype=np.float64))
    y = np.array(series.averages, dtype=np.float64)
    design = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, y, rcond=None)
    residuals = (y - (slope * x + intercept)).tolist()
    return TrendFit(series=series.label, slope=float(slope), intercept=float(intercept), residuals=residuals)


def fit_all(series_list):
    return [fit_trend(s) for s in series_list]
