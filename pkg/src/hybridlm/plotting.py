"""Accuracy-vs-token-cost scatter, saved as SVG.

Output is byte-stable for identical inputs: the SVG id salt is pinned and
the date metadata dropped.
"""

from __future__ import annotations

import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import FrontierPoint, as_point, frontier  # noqa: E402

_RC = {"svg.hashsalt": "hybridlm", "svg.fonttype": "path", "font.size": 9}


def frontier_svg(results: Sequence, title: str = "Accuracy vs token cost") -> str:
    pts: list[FrontierPoint] = [as_point(r) for r in results]
    front = frontier(pts)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        ax.scatter([p.tokens for p in pts], [100 * p.accuracy for p in pts], color="#4878a8", zorder=3)
        for p in pts:
            ax.annotate(p.name, (p.tokens, 100 * p.accuracy), textcoords="offset points", xytext=(4, 4), fontsize=7)
        ax.plot([p.tokens for p in front], [100 * p.accuracy for p in front], color="#c44e52",
                linestyle="--", linewidth=1.2, label="Pareto frontier", zorder=2)
        ax.set_xlabel("mean tokens per question (planner + executor)")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(-2, 102)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()
