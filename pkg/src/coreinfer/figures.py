"""Matplotlib renderers for the CLI report paths.

Each function draws one figure from already-computed data and writes it next
to the delimited output. Dimensionality-reduction scatter plots are out of
scope; the CSVs carry the raw data for those.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = [
    "render_stability_curves",
    "render_sweep",
    "render_bench",
    "render_elbow",
]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_stability_curves(curves: Mapping[str, Sequence[tuple[int, float]]], path) -> Path:
    """Similarity-to-final vs prefix length, one line per document."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for doc, points in curves.items():
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.plot(xs, ys, marker="o", label=str(doc))
    ax.set_xlabel("prefix length (tokens)")
    ax.set_ylabel("core-set similarity to final")
    ax.set_ylim(0.0, 1.05)
    ax.grid(alpha=0.3)
    if len(curves) <= 8:
        ax.legend(fontsize=8)
    return _save(fig, path)


def render_sweep(rows: Sequence[dict], path) -> Path:
    """Perplexity vs sentence-core ratio, one line per token-core ratio."""
    fig, ax = plt.subplots(figsize=(6, 4))
    alphas = sorted({row["alpha"] for row in rows})
    for alpha in alphas:
        cells = sorted((r for r in rows if r["alpha"] == alpha), key=lambda r: r["beta"])
        ax.plot(
            [c["beta"] for c in cells],
            [c["ppl"] for c in cells],
            marker="o",
            label=f"alpha={alpha:g}",
        )
    ax.set_xlabel("beta (sentence core ratio)")
    ax.set_ylabel("perplexity")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def render_bench(rows: Sequence, path) -> Path:
    """Decode throughput bars with the analytic FFN FLOP ratio overlaid."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [row.config for row in rows]
    xs = range(len(rows))
    ax.bar(xs, [row.tokens_per_s for row in rows], color="#4878cf")
    ax.set_xticks(list(xs), labels, rotation=20)
    ax.set_ylabel("decode tokens/s", color="#4878cf")
    twin = ax.twinx()
    twin.plot(xs, [row.flop_ratio for row in rows], "k--o", label="FFN FLOP ratio")
    twin.set_ylabel("FFN FLOP ratio")
    twin.set_ylim(0.0, 1.1)
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)


def render_elbow(wcss: Sequence[tuple[int, float]], chosen_k: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ks = [p[0] for p in wcss]
    ws = [p[1] for p in wcss]
    ax.plot(ks, ws, marker="o")
    ax.axvline(chosen_k, color="crimson", linestyle="--", label=f"elbow k={chosen_k}")
    ax.set_xlabel("k (groups)")
    ax.set_ylabel("within-cluster sum of squares")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)
