"""Report figures: per-class AP bars and training-loss curves.

Rendering is headless (Agg) and file-based; figures accompany the JSON/CSV
artifacts rather than replacing them.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .errors import ArgumentError


def ap_bar_chart(report, path: str, class_names=None, title: str = "per-class AP") -> str:
    """Bar per class plus a mean line.  class_names maps id -> label."""
    items = sorted(report.per_class_ap.items())
    if not items:
        raise ArgumentError("report has no per-class AP values to plot")
    ids = [c for c, _ in items]
    aps = [a for _, a in items]
    labels = [class_names[c] if class_names and c in class_names else str(c)
              for c in ids]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(ids) + 2), 3.2))
    ax.bar(range(len(ids)), aps, color="#4878d0")
    ax.axhline(report.mean_ap, color="#d65f5f", linestyle="--",
               label=f"mAP = {report.mean_ap:.3f}")
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel(f"AP@{report.iou_threshold:g}")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curves(history, path: str, title: str | None = None) -> str:
    """Total loss plus whichever component series the history carries."""
    if not history.records:
        raise ArgumentError("history has no records to plot")
    steps = [r["step"] for r in history.records]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(steps, [r["loss"] for r in history.records],
            label="loss", color="#4878d0")
    for key, color in (("mil", "#d65f5f"), ("ref", "#6acc65"),
                       ("supervised", "#d65f5f"), ("pseudo", "#6acc65")):
        if key in history.records[0]:
            ax.plot(steps, [r[key] for r in history.records],
                    label=key, color=color, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title or f"{history.mode} training (seed {history.seed})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
