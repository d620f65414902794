"""Chart emission for the metrics buckets: one line per counter series,
rendered to whatever format the output extension asks for."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
# Keep SVG text as text so emitted charts stay grep-able.
matplotlib.rcParams["svg.fonttype"] = "none"

import matplotlib.pyplot as plt
from matplotlib.dates import DateFormatter

from .monitor import MetricsBucket

SERIES = ("sent", "deleted", "dead_lettered")
SERIES_STYLE = {
    "sent": {"color": "#1f77b4", "marker": "o"},
    "deleted": {"color": "#2ca02c", "marker": "s"},
    "dead_lettered": {"color": "#d62728", "marker": "x"},
}


def render_metrics_chart(
    buckets: list[MetricsBucket],
    out_path: str | Path,
    title: str = "queue throughput per bucket",
) -> Path:
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(9, 4.5))
    xs = [b.window_start for b in buckets]
    for name in SERIES:
        ax.plot(
            xs,
            [getattr(b, name) for b in buckets],
            label=name,
            markersize=4,
            linewidth=1.5,
            **SERIES_STYLE[name],
        )
    ax.set_title(title)
    ax.set_xlabel("bucket start (UTC)")
    ax.set_ylabel("messages per bucket")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper left")
    if xs:
        ax.xaxis.set_major_formatter(DateFormatter("%H:%M"))
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


__all__ = ["SERIES", "render_metrics_chart"]
