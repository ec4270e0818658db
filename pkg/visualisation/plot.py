"""
SVG plots for comparison reports and training dynamics.

Output is byte-stable for fixed inputs: the SVG hash salt is pinned and no
creation date is written.
"""

import logging
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams['svg.hashsalt'] = 'osref'
plt.rcParams['svg.fonttype'] = 'path'


def _save(fig, save_path):
    save_path = Path(save_path)
    save_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(save_path, format='svg', bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    logger.info(f"Plot written to {save_path}")
    return save_path


def plot_rankings(rankings, save_path):
    """
    Average score per dataset across scales, one line per dataset.

    Args:
        rankings: Ranking objects ordered from smallest to largest scale
        save_path: Destination .svg
    """
    scales = [r.scale for r in rankings]
    datasets = sorted({d for r in rankings for d in r.order})
    fig, ax = plt.subplots(figsize=(8, 5))
    for dataset in datasets:
        ys = []
        for r in rankings:
            by_name = {e.dataset: e.average for e in r.entries}
            ys.append(by_name.get(dataset, np.nan))
        ax.plot(range(len(scales)), ys, marker='o', label=dataset)
    ax.set_xticks(range(len(scales)))
    ax.set_xticklabels(scales)
    ax.set_xlabel('scale (params @ tokens)')
    ax.set_ylabel('average score')
    ax.set_title('Dataset ranking across scales')
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, save_path)


def plot_compute_trends(series_list, fits, flagged, save_path, mode='fit'):
    """
    Average score against training compute (log axis).

    Args:
        series_list: ScalingSeries from alignment
        fits: TrendFit per series, same order
        flagged: Labels of compute-dominated points, drawn hollow
        mode: 'fit' draws the least-squares trend, 'connect' joins the points
    """
    fig, ax = plt.subplots(figsize=(8, 5))
    for series, fit in zip(series_list, fits):
        xs = np.array(series.computes)
        ys = np.array(series.averages)
        line, = ax.plot([], [])
        color = line.get_color()
        for p in series.points:
            hollow = p.label in flagged
            ax.scatter([p.compute], [p.average], s=40, edgecolors=color,
                       facecolors='none' if hollow else color, zorder=3)
        if mode == 'connect' and len(xs) > 1:
            ax.plot(xs, ys, color=color, label=f"{series.label} (connect)")
        elif mode == 'fit' and fit.fitted:
            grid = np.logspace(np.log10(xs.min()), np.log10(xs.max()), 20)
            ax.plot(grid, fit.predict(grid), color=color, linestyle='--', label=f"{series.label} (trend)")
        else:
            ax.plot([], [], color=color, marker='o', linestyle='none', label=series.label)
    ax.set_xscale('log')
    ax.set_xlabel('training compute (FLOPs, 6ND)')
    ax.set_ylabel('average score')
    ax.set_title('Scaling trends on a common compute axis (hollow: compute-dominated)')
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3, which='both')
    return _save(fig, save_path)


def plot_training_dynamics(frame, save_path):
    """Average score against tokens seen, from a per-checkpoint table; held-out loss on a second axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(frame['tokens_seen'], frame['average'], marker='o')
    ax.set_xlabel('tokens seen')
    ax.set_ylabel('average score')
    ax.set_title('Training dynamics')
    ax.grid(alpha=0.3)
    if 'heldout_loss' in frame:
        loss_ax = ax.twinx()
        loss_ax.plot(frame['tokens_seen'], frame['heldout_loss'], marker='s', color='tab:red')
        loss_ax.set_ylabel('held-out loss (nats)')
    return _save(fig, save_path)


def plot_loss_curves(curves, save_path):
    """Loss per iteration for each ablation arm (columns arm, iteration, loss)."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for arm, group in curves.groupby('arm', sort=True):
        ax.plot(group['iteration'], group['loss'], label=arm)
    ax.set_xlabel('iteration')
    ax.set_ylabel('training loss')
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, save_path)
