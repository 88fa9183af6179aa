"""Score report rendering: aligned text table, TSV, JSON, and a figure.

``write_report`` drops all three delimited forms plus a PNG bar chart next
to each other under a common path prefix, so a single eval leaves both
machine- and human-readable artifacts.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import ScoreReport

_METRIC_LABELS = (("muc", "MUC"), ("b3", "B3"), ("ceaf_phi4", "CEAF_phi4"))


def _rows(report: ScoreReport) -> list[tuple[str, float, float, float]]:
    rows = []
    for key, label in _METRIC_LABELS:
        m = getattr(report, key)
        rows.append((label, m.precision, m.recall, m.f1))
    rows.append(("mention", report.mention.precision, report.mention.recall,
                 report.mention.f1))
    return rows


def format_table(report: ScoreReport) -> str:
    """Aligned columns mirroring the usual metric/P/R/F1 layout."""
    lines = [f"{'metric':<10} {'P':>7} {'R':>7} {'F1':>7}"]
    for label, p, r, f1 in _rows(report):
        lines.append(f"{label:<10} {p:>7.4f} {r:>7.4f} {f1:>7.4f}")
    lines.append(f"{'Avg F1':<10} {'':>7} {'':>7} {report.avg_f1:>7.4f}")
    lines.append(f"documents: {report.num_documents}")
    return "\n".join(lines)


def format_tsv(report: ScoreReport) -> str:
    lines = ["metric\tprecision\trecall\tf1"]
    for label, p, r, f1 in _rows(report):
        lines.append(f"{label}\t{p:.6f}\t{r:.6f}\t{f1:.6f}")
    lines.append(f"avg_f1\t\t\t{report.avg_f1:.6f}")
    return "\n".join(lines)


def render_figure(report: ScoreReport, path: str) -> None:
    """Grouped P/R/F1 bars per metric, with the Avg F1 as a reference line."""
    labels = [label for label, *_ in _rows(report)]
    rows = _rows(report)
    x = range(len(rows))
    width = 0.27
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.bar([i - width for i in x], [r[1] for r in rows], width, label="P")
    ax.bar(list(x), [r[2] for r in rows], width, label="R")
    ax.bar([i + width for i in x], [r[3] for r in rows], width, label="F1")
    ax.axhline(report.avg_f1, linestyle="--", linewidth=1.0, color="gray",
               label=f"Avg F1 = {report.avg_f1:.3f}")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend(loc="lower right", fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    # fixed metadata keeps the PNG byte-identical across reruns
    fig.savefig(path, metadata={"Software": ""})
    plt.close(fig)


def write_report(report: ScoreReport, prefix: str) -> dict[str, str]:
    """Write ``<prefix>.json``, ``<prefix>.tsv``, and ``<prefix>.png``."""
    parent = os.path.dirname(prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)
    paths = {
        "json": prefix + ".json",
        "tsv": prefix + ".tsv",
        "png": prefix + ".png",
    }
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(paths["tsv"], "w", encoding="utf-8") as fh:
        fh.write(format_tsv(report) + "\n")
    render_figure(report, paths["png"])
    return paths
