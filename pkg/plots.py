import logging
import os

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Initialize logger
logger = logging.getLogger(__name__)

PLOT_METRICS = ('p_stoi', 'p_estoi', 'mcd')
METRIC_LABELS = {'p_stoi': 'P-STOI', 'p_estoi': 'P-ESTOI', 'mcd': 'MCD (dB)'}


def plot_scores(summary, out_dir):
    """
    Bar chart of the mean of each metric per (word, error) group, one bar per scope.

    Args:
        summary: rows from utils.summarize
        out_dir: directory for the PNG files

    Returns:
        list of written paths
    """
    if not summary:
        logger.warning("No summary rows to plot")
        return []
    os.makedirs(out_dir, exist_ok=True)

    groups = []
    scopes = []
    for row in summary:
        group = f"{row['word']} ({row['error']})"
        if group not in groups:
            groups.append(group)
        if row['scope'] not in scopes:
            scopes.append(row['scope'])
    lookup = {(f"{r['word']} ({r['error']})", r['scope']): r for r in summary}

    width = 0.8 / len(scopes)
    x = np.arange(len(groups))
    paths = []
    for metric in PLOT_METRICS:
        fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(groups)), 4.0))
        for k, scope in enumerate(scopes):
            values = [lookup[(g, scope)][metric] if (g, scope) in lookup else np.nan for g in groups]
            ax.bar(x + (k - (len(scopes) - 1) / 2.0) * width, values, width, label=scope)
        ax.set_xticks(x)
        ax.set_xticklabels(groups, rotation=30, ha='right')
        ax.set_ylabel(METRIC_LABELS[metric])
        ax.legend(title='scope')
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}_by_scope.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)

    logger.info(f"Wrote {len(paths)} plot(s) to {out_dir}")
    return paths
