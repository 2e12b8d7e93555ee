"""Static SVG rendering of the maze and trajectory bundles."""
from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Circle, Rectangle  # noqa: E402

# fixed ids and no timestamp, so identical inputs give identical bytes
RC = {"svg.hashsalt": "novelsac", "svg.fonttype": "path", "path.simplify": False}

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
FIXED_COLORS = {"optimal": "#1f77b4", "random": "#7f7f7f", "backtrack": "#000000"}


def _color_for(label: str, assigned: dict) -> str:
    if label in FIXED_COLORS:
        return FIXED_COLORS[label]
    if label not in assigned:
        used = set(assigned.values()) | set(FIXED_COLORS.values())
        free = [c for c in PALETTE if c not in used] or PALETTE
        assigned[label] = free[0]
    return assigned[label]


def render_svg(geometry: dict, blockades=(), trajectories=(), title: str | None = None) -> bytes:
    """``geometry`` is ``WorldGeometry.to_dict()``; ``trajectories`` yields TrajectoryFile objects."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
        for x0, y0, x1, y1 in geometry["walls"]:
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, color="#444444", zorder=1))
        for name in blockades:
            x0, y0, x1, y1 = geometry["blockade_slots"][name]
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, color="#b22222", zorder=2))
        g = geometry["goal"]
        ax.add_patch(Circle(g["center"], g["radius"], color="#f2c230", alpha=0.8, zorder=2))
        ax.plot(*geometry["start"], marker="o", color="black", markersize=4, zorder=5)

        assigned: dict = {}
        seen = []
        for traj in trajectories:
            for label, pts in traj.paths():
                color = _color_for(label, assigned)
                xs, ys = zip(*pts)
                ax.plot(xs, ys, color=color, linewidth=0.8, alpha=0.6, zorder=3)
                if label not in seen:
                    seen.append(label)
        if seen:
            handles = [plt.Line2D([], [], color=_color_for(lbl, assigned), label=lbl) for lbl in seen]
            ax.legend(handles=handles, loc="lower left", fontsize=7, framealpha=0.9)
        if title:
            ax.set_title(title, fontsize=9)
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()
