"""Report files for the comparison modes: CSV, Markdown and SVG."""

import logging
from pathlib import Path

import pandas as pd

from compare.ranking import flag_all, leaderboard, rank_consistency, rankings_by_scale
from compare.trends import align_with_report, fit_all
from errors import ComparisonError
from visualisation import plot

logger = logging.getLogger(__name__)


def _write(frame, out_dir, stem, floatfmt='.3g'):
    frame.to_csv(out_dir / f"{stem}.csv", index=False, float_format='%.6g')
    (out_dir / f"{stem}.md").write_text(frame.to_markdown(index=False, floatfmt=floatfmt) + '\n')
    return [out_dir / f"{stem}.csv", out_dir / f"{stem}.md"]


def rank_report(points, out_dir):
    """Leaderboard sorted by average, per-scale dataset rankings and their consistency."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = _write(leaderboard(points), out_dir, 'leaderboard')
    rankings = rankings_by_scale(points)
    if rankings:
        written += _write(pd.concat([r.frame() for r in rankings], ignore_index=True), out_dir, 'rankings')
        written.append(plot.plot_rankings(rankings, out_dir / 'rankings.svg'))
    comparable = [r for r in rankings if sorted(r.order) == sorted(rankings[0].order)] if rankings else []
    if len(comparable) >= 2 and len(comparable[0].order) >= 2:
        matrix, min_tau = rank_consistency(comparable)
        matrix.to_csv(out_dir / 'rank_consistency.csv', float_format='%.6g')
        written.append(out_dir / 'rank_consistency.csv')
        logger.info(f"Minimum Kendall tau across scales: {min_tau:.4f}")
    return written


def trend_report(points, out_dir, mode='fit'):
    """Per-series trend lines on the compute axis plus the aligned point table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    alignment = align_with_report(points)
    if not alignment.series:
        raise ComparisonError("no point has both params and tokens")
    fits = fit_all(alignment.series)
    rows = []
    for series, fit in zip(alignment.series, fits):
        for p, residual in zip(series.points, fit.residuals or [None] * len(series.points)):
            rows.append({
                'series': series.label,
                'model': p.model,
                'compute': p.compute,
                'average': p.average,
                'kind': fit.kind,
                'slope': fit.slope,
                'intercept': fit.intercept,
                'residual': residual,
            })
    written = _write(pd.DataFrame(rows), out_dir, 'trends', floatfmt='.4g')
    if alignment.rejected:
        rejected = pd.DataFrame([{'model': p.model, 'reason': r} for p, r in alignment.rejected])
        written += _write(rejected, out_dir, 'rejected')
    aligned = [p for s in alignment.series for p in s.points]
    flagged = {r.point for r in flag_all(aligned) if r.flagged}
    written.append(plot.plot_compute_trends(alignment.series, fits, flagged, out_dir / f'trends_{mode}.svg', mode=mode))
    return written


def flag_report(points, out_dir):
    """Compute-dominance table: each point with its dominators."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aligned = [p for s in align_with_report(points).series for p in s.points]
    reports = flag_all(aligned)
    frame = pd.DataFrame([{
        'point': r.point,
        'compute': r.compute,
        'average': r.average,
        'flagged': r.flagged,
        'dominated_by': '; '.join(r.dominators),
    } for r in sorted(reports, key=lambda r: (r.compute, r.point))])
    written = _write(frame, out_dir, 'flags')
    for r in reports:
        if r.flagged:
            logger.info(f"Flagged {r.point}: dominated by {', '.join(r.dominators)}")
    return written


REPORTS = {'rank': rank_report, 'trend': trend_report, 'flag': flag_report}
