"""Robustness report aggregation and rendering.

Consumes the per-variant JSONL records produced by ``flowgauge eval`` and
renders (a) a per-perturbation-kind mean table (rows = kinds, columns =
node / graph), (b) CSV plot data with per-band means, and (c) matplotlib
figures saved next to the CSV.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_BAND_ORDER = {"light": 0, "moderate": 1, "heavy": 2}


@dataclass(frozen=True)
class GroupMean:
    label: str
    count: int
    mean_f1_node: float
    mean_f1_graph: float


def variant_records(records: Iterable[Mapping[str, Any]]) -> list[dict[str, Any]]:
    return [dict(r) for r in records if r.get("record", "variant") == "variant"]


def _group_label(record: Mapping[str, Any]) -> str:
    kind = str(record.get("perturbation_kind", "unknown"))
    band = record.get("band")
    if kind == "noise" and band:
        return f"noise:{band}"
    return kind


def _sort_key(label: str) -> tuple[int, int, str]:
    if label.startswith("noise:"):
        band = label.split(":", 1)[1]
        return (1, _BAND_ORDER.get(band, 99), label)
    return (0, 0, label)


def aggregate(records: Iterable[Mapping[str, Any]]) -> list[GroupMean]:
    """Mean f1 per perturbation group, deterministic row order.

    Aggregation order is per-cluster mean first, then a macro-average
    across clusters, so clusters with many variants of one kind do not
    dominate the table. ``count`` is the number of clusters contributing
    to a row.
    """
    groups: dict[str, dict[str, list[Mapping[str, Any]]]] = {}
    for record in variant_records(records):
        by_cluster = groups.setdefault(_group_label(record), {})
        by_cluster.setdefault(str(record.get("cluster_id", "")), []).append(record)
    out = []
    for label in sorted(groups, key=_sort_key):
        cluster_means = [
            (
                math.fsum(float(m["f1_node"]) for m in members) / len(members),
                math.fsum(float(m["f1_graph"]) for m in members) / len(members),
            )
            for _, members in sorted(groups[label].items())
        ]
        out.append(
            GroupMean(
                label=label,
                count=len(cluster_means),
                mean_f1_node=math.fsum(node for node, _ in cluster_means) / len(cluster_means),
                mean_f1_graph=math.fsum(graph for _, graph in cluster_means) / len(cluster_means),
            )
        )
    return out


def render_table(means: list[GroupMean]) -> str:
    width = max([len(m.label) for m in means] + [len("perturbation")])
    lines = [
        "mean f1 per perturbation (macro-averaged across clusters; n = clusters)",
        f"{'perturbation'.ljust(width)}  {'n':>5}  {'node':>7}  {'graph':>7}",
        f"{'-' * width}  {'-' * 5}  {'-' * 7}  {'-' * 7}",
    ]
    for m in means:
        lines.append(
            f"{m.label.ljust(width)}  {m.count:>5}  {m.mean_f1_node:>7.4f}  {m.mean_f1_graph:>7.4f}"
        )
    return "\n".join(lines)


def write_plot_csv(means: list[GroupMean], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["perturbation", "n", "mean_f1_node", "mean_f1_graph"])
        for m in means:
            writer.writerow([m.label, m.count, f"{m.mean_f1_node:.6f}", f"{m.mean_f1_graph:.6f}"])


def render_figures(means: list[GroupMean], out_dir: str | Path) -> list[Path]:
    """Save the report figures; returns the written paths."""
    out_dir = Path(out_dir)
    written: list[Path] = []

    labels = [m.label for m in means]
    x = range(len(means))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(means)), 4.0))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [m.mean_f1_node for m in means], width, label="node")
    ax.bar([i + width / 2 for i in x], [m.mean_f1_graph for m in means], width, label="graph")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mean f1")
    ax.set_title("Workflow robustness by perturbation")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "robustness_means.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    bands = [m for m in means if m.label.startswith("noise:")]
    if len(bands) >= 2:
        bands.sort(key=lambda m: _BAND_ORDER.get(m.label.split(":", 1)[1], 99))
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        names = [m.label.split(":", 1)[1] for m in bands]
        ax.plot(names, [m.mean_f1_node for m in bands], marker="o", label="node")
        ax.plot(names, [m.mean_f1_graph for m in bands], marker="s", label="graph")
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("noise band")
        ax.set_ylabel("mean f1")
        ax.set_title("Robustness across noise intensity")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "noise_band_trend.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
