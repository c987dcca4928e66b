"""Self-contained SVG figures for the pipeline report.

Output is byte-deterministic: a fixed svg hashsalt, no creation date, and a
lineage comment (config hash + seed) inserted after the XML declaration.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("SVG")

import matplotlib.pyplot as plt
import numpy as np

_HASHSALT = "itupred"


def _save(fig, path, lineage: str | None) -> None:
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    if lineage:
        with open(path, encoding="utf-8") as handle:
            lines = handle.readlines()
        lines.insert(1, f"<!-- {lineage} -->\n")
        with open(path, "w", encoding="utf-8") as handle:
            handle.writelines(lines)


def _new_figure(figsize):
    plt.rcParams["svg.hashsalt"] = _HASHSALT
    return plt.subplots(figsize=figsize)


def _no_data(ax) -> None:
    ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes)


def plot_calibration(curves: dict, path, lineage: str | None = None) -> None:
    """Reliability diagram; `curves` maps model name to CalibrationCurve."""
    fig, ax = _new_figure((6, 5))
    ax.plot([0, 1], [0, 1], "r--", linewidth=1, label="perfect calibration")
    any_points = False
    for name, curve in curves.items():
        if not curve.bins:
            continue
        any_points = True
        xs = [b[0] for b in curve.bins]
        ys = [b[1] for b in curve.bins]
        ax.plot(xs, ys, marker="o", label=name)
    if not any_points:
        _no_data(ax)
    ax.set_xlabel("mean predicted probability")
    ax.set_ylabel("observed admission rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left")
    ax.set_title("Calibration")
    _save(fig, path, lineage)


def plot_chi2_bars(names, scores, path, lineage: str | None = None) -> None:
    """Horizontal bars, highest score on top."""
    fig, ax = _new_figure((7, max(3, 0.3 * len(names) + 1)))
    if len(names) == 0:
        _no_data(ax)
    else:
        order = np.argsort(scores)
        ax.barh(np.arange(len(names)), np.asarray(scores)[order], color="#4878b0")
        ax.set_yticks(np.arange(len(names)))
        ax.set_yticklabels([names[i] for i in order], fontsize=8)
        ax.set_xlabel("chi-squared score")
    ax.set_title(f"Top {len(names)} concepts by chi-squared score")
    fig.tight_layout()
    _save(fig, path, lineage)


def plot_shap_beeswarm(
    summary, feature_names, path, lineage: str | None = None, max_features: int = 20
) -> None:
    """One row per feature (by mean |phi|, top row first); point color tracks
    the feature value, horizontal position the attribution."""
    order = summary.order[:max_features]
    fig, ax = _new_figure((7, max(3, 0.35 * len(order) + 1)))
    if len(order) == 0 or all(len(summary.points[j]) == 0 for j in order):
        _no_data(ax)
    else:
        rng = np.random.default_rng(0)  # jitter only; fixed for determinism
        for row, j in enumerate(order):
            points = summary.points[j]
            y = len(order) - 1 - row + rng.uniform(-0.25, 0.25, size=len(points))
            values = points[:, 0]
            span = values.max() - values.min()
            colors = (values - values.min()) / span if span > 0 else np.full(len(values), 0.5)
            ax.scatter(points[:, 1], y, c=colors, cmap="coolwarm", s=14, alpha=0.85)
        ax.axvline(0.0, color="grey", linewidth=0.8)
        ax.set_yticks(np.arange(len(order))[::-1])
        ax.set_yticklabels([feature_names[j] for j in order], fontsize=8)
        ax.set_xlabel("attribution (toward ITU admission ->)")
    ax.set_title("Feature attributions across patients")
    fig.tight_layout()
    _save(fig, path, lineage)


def plot_lime_bars(names, scores, path, lineage: str | None = None, title: str = "") -> None:
    """Signed local importance bars: positive toward ITU, negative toward ward."""
    fig, ax = _new_figure((7, max(3, 0.3 * len(names) + 1)))
    if len(names) == 0:
        _no_data(ax)
    else:
        scores = np.asarray(scores)
        order = np.argsort(np.abs(scores))
        colors = ["#e1812c" if scores[i] > 0 else "#4878b0" for i in order]
        ax.barh(np.arange(len(order)), scores[order], color=colors)
        ax.set_yticks(np.arange(len(order)))
        ax.set_yticklabels([names[i] for i in order], fontsize=8)
        ax.axvline(0.0, color="grey", linewidth=0.8)
        ax.set_xlabel("local importance")
    ax.set_title(title or "Local explanation")
    fig.tight_layout()
    _save(fig, path, lineage)
