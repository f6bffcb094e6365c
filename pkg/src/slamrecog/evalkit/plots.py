"""SVG rendering of precision/recall and recall/IoU curves."""

from __future__ import annotations

from typing import List, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PrCurve  # noqa: E402

# fixed hash salt keeps SVG output byte-stable across runs
plt.rcParams["svg.hashsalt"] = "slamrecog"


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_pr(curve: PrCurve, path, title: str = "precision / recall") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for lab, c in curve.curves.items():
        if len(c.recall) == 0:
            continue
        ax.step(c.recall, c.precision, where="post", label=f"{lab} (AP {c.ap:.3f})")
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"{title}, mAP {curve.mAP:.3f}")
    ax.legend(fontsize=7, loc="lower left")
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_recall(series: Mapping[str, List[dict]], path, title: str = "proposal recall") -> None:
    """One recall-vs-IoU line per named series of ``recall_at_iou`` rows."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, rows in series.items():
        x = [r["iou"] for r in rows]
        y = [r["recall"] for r in rows]
        ppf = rows[0]["proposals_per_frame"] if rows else 0.0
        ax.plot(x, y, marker="o", label=f"{name} ({ppf:.1f}/frame)")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    _save(fig, path)
