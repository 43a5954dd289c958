"""CSV aggregation and static SVG figures for run directories.

Figures are rendered with matplotlib's SVG backend straight to files (no
display server) and are byte-deterministic: the hash salt is pinned and the
creation date is stripped, so re-running a report reproduces identical
output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "promptmix"

import matplotlib.pyplot as plt

from .errors import InvalidInputError


def write_csv(path, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(x) for x in row])


def _format_cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise InvalidInputError(f"empty CSV: {path}") from None
        return columns, [row for row in reader]


def merge_run_csvs(run_csvs: dict[str, Path]) -> tuple[list[str], list[list[str]]]:
    """Concatenate per-run CSVs under a leading run_id column."""
    if not run_csvs:
        raise InvalidInputError("no run CSVs to merge")
    merged_columns: list[str] | None = None
    out: list[list[str]] = []
    for run_id in sorted(run_csvs):
        columns, rows = read_csv(run_csvs[run_id])
        if merged_columns is None:
            merged_columns = ["run_id"] + columns
        elif merged_columns != ["run_id"] + columns:
            raise InvalidInputError(f"run {run_id} has mismatched columns")
        out.extend([[run_id] + row for row in rows])
    return merged_columns, out


def _new_figure():
    fig, ax = plt.subplots(figsize=(7, 4.5), dpi=100)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save_svg(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_loss_curves(runs: dict[str, tuple[list[str], list[list[str]]]], path) -> None:
    """One panel per loss term, every run overlaid, epoch on the x axis."""
    if not runs:
        raise InvalidInputError("no runs to plot")
    terms = ["loss_total", "loss_cls", "loss_router", "loss_text"]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), dpi=100)
    for ax, term in zip(axes.flat, terms):
        for run_id in sorted(runs):
            columns, rows = runs[run_id]
            if term not in columns or "epoch" not in columns:
                continue
            xi, yi = columns.index("epoch"), columns.index(term)
            xs = [float(r[xi]) for r in rows]
            ys = [float(r[yi]) for r in rows]
            ax.plot(xs, ys, label=run_id, linewidth=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel(term)
        ax.grid(True, alpha=0.3)
    handles, labels = axes.flat[0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="lower center", ncol=min(len(labels), 4), fontsize=8)
    _save_svg(fig, path)


def plot_kl_trace(runs: dict[str, tuple[list[str], list[list[str]]]], path) -> None:
    """Mean router-vs-reference KL per epoch, every run overlaid."""
    if not runs:
        raise InvalidInputError("no runs to plot")
    fig, ax = _new_figure()
    for run_id in sorted(runs):
        columns, rows = runs[run_id]
        if "kl_mean" not in columns:
            continue
        xi, yi = columns.index("epoch"), columns.index("kl_mean")
        ax.plot([float(r[xi]) for r in rows], [float(r[yi]) for r in rows], label=run_id, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean gating KL to hard reference")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    _save_svg(fig, path)


def plot_shots_accuracy(points: list[tuple[int, float, str]], path) -> None:
    """Accuracy against shot count; one line per run label, mean over runs."""
    if not points:
        raise InvalidInputError("no accuracy points to plot")
    by_label: dict[str, dict[int, list[float]]] = {}
    for shots, top1, label in points:
        by_label.setdefault(label, {}).setdefault(shots, []).append(top1)
    fig, ax = _new_figure()
    for label in sorted(by_label):
        shot_map = by_label[label]
        xs = sorted(shot_map)
        ys = [sum(shot_map[s]) / len(shot_map[s]) for s in xs]
        ax.plot(xs, ys, marker="o", label=label, linewidth=1.2)
    ax.set_xscale("log", base=2)
    ax.set_xticks(sorted({s for s, _, _ in points}))
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.set_xlabel("shots per class")
    ax.set_ylabel("top-1 accuracy")
    ax.legend(fontsize=8)
    _save_svg(fig, path)
