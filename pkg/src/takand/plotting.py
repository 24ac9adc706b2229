"""Figures written next to the JSON reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "takand",
}


def _moving_average(values: Sequence[float], window: int):
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def loss_curve(losses: Sequence[Mapping[str, float]], path, window: int = 50) -> Path:
    """Total, hinge and diffusion loss against step, smoothed with a trailing mean."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if losses:
            steps = [row["step"] for row in losses]
            for key in ("loss", "hinge", "diffusion"):
                ax.plot(steps, _moving_average([row[key] for row in losses], window), label=key, lw=1.2)
            ax.legend()
        ax.set_xlabel("step")
        ax.set_ylabel(f"loss (mean of last {window})")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def relation_metrics(per_relation: Mapping[str, Mapping[str, float]], path, title: str = "") -> Path:
    """Grouped bars of MRR and Hits@{1,5,10} per relation."""
    path = Path(path)
    names = sorted(per_relation)
    keys = ("mrr", "hits1", "hits5", "hits10")
    width = 0.8 / len(keys)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(names) + 2), 3.6))
        for j, key in enumerate(keys):
            xs = [i + (j - 1.5) * width for i in range(len(names))]
            ax.bar(xs, [per_relation[n][key] for n in names], width, label=key)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0, 1.05)
        ax.legend(ncol=4, loc="upper center", bbox_to_anchor=(0.5, 1.15))
        if title:
            ax.set_title(title, pad=24)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
