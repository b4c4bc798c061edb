"""SVG line and bar charts for ablation tables."""
import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from last.utils import atomic_write_bytes  # noqa: E402


def _figure(width=6.0, height=None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    if not height:
        height = width * golden_ratio
    fig, ax = plt.subplots(figsize=(width, height), facecolor="w")
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path):
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())


def line_plot(table, x, y, series, path, title="", xlabel=None, ylabel=None):
    """One line per distinct value of ``series``; ``table`` is a pandas DataFrame."""
    fig, ax = _figure()
    for key, group in table.groupby(series, sort=True):
        group = group.sort_values(x)
        ax.plot(group[x], group[y], marker="o", label="%s=%s" % (series, key))
    ax.set_xlabel(xlabel or x)
    ax.set_ylabel(ylabel or y)
    ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def bar_plot(labels, values, path, title="", ylabel=""):
    fig, ax = _figure()
    positions = range(len(labels))
    ax.bar(positions, values, color="0.4")
    ax.set_xticks(list(positions))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    _save(fig, path)
