"""Training-curve figures rendered next to the metrics CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import read_metrics  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_curves(runs: dict, out_path, title: str | None = None) -> Path:
    """Plot bits/sub-pixel against step for each labelled run.

    ``runs`` maps a label to rows as returned by :func:`read_metrics`. Train
    curves are solid, eval points dashed with markers.
    """
    out_path = Path(out_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, (label, rows) in enumerate(runs.items()):
            color = f"C{k % 10}"
            tr = [(r["step"], r["train_bpd"]) for r in rows if r["train_bpd"] is not None]
            ev = [(r["step"], r["eval_bpd"]) for r in rows if r["eval_bpd"] is not None]
            if tr:
                ax.plot(*zip(*tr), color=color, lw=1.2, label=f"{label} train")
            if ev:
                ax.plot(*zip(*ev), color=color, lw=1.0, ls="--", marker="o", ms=3, label=f"{label} eval")
        ax.set_xlabel("step")
        ax.set_ylabel("bits per sub-pixel")
        if title:
            ax.set_title(title)
        if runs:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out_path, dpi=120, metadata={"Software": None})
        plt.close(fig)
    return out_path


def plot_metrics_files(paths, out_path, labels=None, title: str | None = None) -> Path:
    """Render one figure from several metrics CSVs."""
    paths = [Path(p) for p in paths]
    labels = labels or [_label_for(p) for p in paths]
    return plot_curves({lab: read_metrics(p) for lab, p in zip(labels, paths)}, out_path, title)


def _label_for(path: Path) -> str:
    rows = read_metrics(path)
    if rows and rows[0].get("ablation"):
        return rows[0]["ablation"]
    return path.parent.name or path.stem
