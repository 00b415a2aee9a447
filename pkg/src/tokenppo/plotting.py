"""Figure rendering for report paths.

Every CLI command that writes a delimited report can also render a PNG
next to it. Kept deliberately small: line plots with a shared style.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "axes.titlesize": 11,
}


def line_figure(groups: dict[str, tuple], path, title: str = "",
                xlabel: str = "step", ylabel: str = "value") -> str:
    """One axis, one line per (label -> (x, y)) group; writes ``path``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label in sorted(groups):
            x, y = groups[label]
            ax.plot(x, y, label=label, linewidth=1.4)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(groups) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return str(path)


def panel_figure(panels: list[tuple[str, dict[str, tuple]]], path,
                 xlabel: str = "step") -> str:
    """Stacked panels, each a (title, groups) pair sharing the x axis."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(panels), 1, sharex=True,
                                 figsize=(7.0, 2.6 * len(panels)))
        if len(panels) == 1:
            axes = [axes]
        for ax, (title, groups) in zip(axes, panels):
            for label in sorted(groups):
                x, y = groups[label]
                ax.plot(x, y, label=label, linewidth=1.4)
            ax.set_ylabel(title)
            if len(groups) > 1:
                ax.legend()
        axes[-1].set_xlabel(xlabel)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return str(path)
