"""Figure rendering for benchmark reports.

Figures are written next to the delimited score files. Rendering is
deterministic: fixed figure geometry, no timestamps in the output.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .benchmark import ScoreReport

BAR_COLOR = "#4878a8"
HIGHLIGHT_COLOR = "#b04030"


def render_score_figure(report: ScoreReport, path) -> None:
    """Horizontal bars of mean held-out scores, best method on top,
    annotated with the paired test against the next-ranked method."""
    ordered = report.ordered()
    labels = [m.label for m in ordered]
    means = [m.mean_score for m in ordered]
    spreads = [np.std(m.fold_scores) for m in ordered]
    p_values = {(t["better"], t["worse"]): t["p_value"]
                for t in report.adjacent_p_values}

    fig, ax = plt.subplots(figsize=(7.0, 1.0 + 0.45 * len(ordered)))
    positions = np.arange(len(ordered))[::-1]
    colors = [HIGHLIGHT_COLOR if label == "glm-fixed" else BAR_COLOR
              for label in labels]
    ax.barh(positions, means, xerr=spreads, color=colors, height=0.6,
            error_kw={"elinewidth": 1.0, "capsize": 2.0})
    for i, (better, worse) in enumerate(zip(ordered, ordered[1:])):
        p = p_values.get((better.label, worse.label))
        if p is None:
            continue
        ax.annotate(f"p={p:.3g}",
                    xy=(max(means[i], means[i + 1]), positions[i] - 0.5),
                    xytext=(4, 0), textcoords="offset points",
                    va="center", fontsize=7, color="0.25")
    ax.set_yticks(positions)
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel(f"mean held-out score ({report.metric})")
    ax.set_title(f"{report.n_folds}-fold leave-one-run-out comparison",
                 fontsize=10)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_identification_figure(report: ScoreReport, path,
                                 chance: float | None = None) -> None:
    """Bar chart of identification accuracies per method."""
    ordered = sorted(report.methods, key=lambda m: -m.mean_identification)
    labels = [m.label for m in ordered]
    accuracies = [m.mean_identification for m in ordered]

    fig, ax = plt.subplots(figsize=(7.0, 1.0 + 0.45 * len(ordered)))
    positions = np.arange(len(ordered))[::-1]
    colors = [HIGHLIGHT_COLOR if label == "glm-fixed" else BAR_COLOR
              for label in labels]
    ax.barh(positions, accuracies, color=colors, height=0.6)
    if chance is not None:
        ax.axvline(chance, color="0.4", linestyle="--", linewidth=1.0)
        ax.annotate("chance", xy=(chance, positions[-1] - 0.45),
                    xytext=(3, 0), textcoords="offset points",
                    fontsize=7, color="0.3")
    ax.set_yticks(positions)
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("identification accuracy")
    ax.set_xlim(0, 1.05)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_benchmark_figures(report: ScoreReport, outdir,
                             chance: float | None = None) -> list[str]:
    """Render the standard report figures; returns the file names."""
    import os

    score_path = os.path.join(outdir, "encoding_scores.png")
    ident_path = os.path.join(outdir, "identification_scores.png")
    render_score_figure(report, score_path)
    render_identification_figure(report, ident_path, chance=chance)
    return ["encoding_scores.png", "identification_scores.png"]
