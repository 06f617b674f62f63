"""Report emission: delimited rows plus rendered figures.

Every report is written as a CSV (the machine-readable artifact) and, next
to it, a PNG rendering of the same data for eyeballing run dynamics. CSV
content is byte-deterministic; figures are drawn with the Agg backend.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .protocol import format_float

GAP_HIST_HEADER = ("bin_low", "bin_high", "count")
SPREAD_HEADER = ("altitude_m", "radius_m", "accumulated_selected_count")


def histogram_rows(gaps: Sequence[float], edges: Sequence[float]) -> list[tuple[float, float, int]]:
    """Bin gaps into fixed edges; values beyond the last edge land in the
    last bin so long tails are never silently dropped."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2:
        raise ValueError("need at least two bin edges")
    g = np.asarray(list(gaps), dtype=np.float64)
    if len(g):
        g = np.clip(g, edges[0], np.nextafter(edges[-1], -np.inf))
    counts, _ = np.histogram(g, bins=edges)
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(len(edges) - 1)
    ]


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [format_float(v) if isinstance(v, float) else v for v in row]
            )


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_gap_histogram(csv_path, rows, title: str = "domain gap distribution") -> None:
    """CSV of (bin_low, bin_high, count) plus a PNG bar chart alongside."""
    write_csv(csv_path, GAP_HIST_HEADER, rows)
    render_gap_histogram(Path(csv_path).with_suffix(".png"), rows, title)


def render_gap_histogram(png_path, rows, title: str) -> None:
    lows = [r[0] for r in rows]
    highs = [r[1] for r in rows]
    counts = [r[2] for r in rows]
    widths = [h - l for l, h in zip(lows, highs)]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(lows, counts, width=widths, align="edge", color="#4878cf", edgecolor="none")
    ax.set_xlabel("domain gap")
    ax.set_ylabel("virtual images")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)


def spread_rows(
    altitudes: Sequence[float],
    radii: Sequence[float],
    counts: dict[tuple[float, float], int],
) -> list[tuple[float, float, int]]:
    """Full (altitude × radius) grid of accumulated selection counts."""
    return [
        (float(a), float(r), int(counts.get((float(a), float(r)), 0)))
        for a in sorted(altitudes)
        for r in sorted(radii)
    ]


def write_metadata_spread(csv_path, rows, title: str = "selected camera locations") -> None:
    """CSV of (altitude_m, radius_m, accumulated_selected_count) plus a PNG heatmap."""
    write_csv(csv_path, SPREAD_HEADER, rows)
    render_metadata_spread(Path(csv_path).with_suffix(".png"), rows, title)


def render_metadata_spread(png_path, rows, title: str) -> None:
    altitudes = sorted({r[0] for r in rows})
    radii = sorted({r[1] for r in rows})
    grid = np.zeros((len(radii), len(altitudes)))
    for a, r, c in rows:
        grid[radii.index(r), altitudes.index(a)] = c
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="Blues")
    ax.set_xticks(range(len(altitudes)), [format_float(a) for a in altitudes])
    ax.set_yticks(range(len(radii)), [format_float(r) for r in radii])
    ax.set_xlabel("altitude (m)")
    ax.set_ylabel("circle radius (m)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="selected")
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)
