"""Report emission: CSV tables under ``report/tables`` and PNG figures under ``report/figures``."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .core import IGNORE_LABEL  # noqa: E402
from .harness import (  # noqa: E402
    OracleResult,
    Report,
    ResultTable,
    Selection,
    aggregate_report,
    column_sort_key,
    entropy_improvement_data,
    fit_line,
    na_scores,
    oracle_select,
    positive_methods,
    select_hparams,
    selected_scores,
)
from .metrics import PerImageCounts, evaluate  # noqa: E402

logger = logging.getLogger(__name__)


def _slug(column: str) -> str:
    return column.replace("/", "_")


def selection_frame(selection: Selection) -> pd.DataFrame:
    choices = sorted(selection.choices.values(), key=lambda c: (column_sort_key(c.column), c.cell))
    rows = [
        {"column": c.column, "cell": c.cell, "config": c.config, "lr": c.lr, "iterations": c.iterations, "score": c.score}
        for c in choices
    ]
    return pd.DataFrame(rows, columns=["column", "cell", "config", "lr", "iterations", "score"])


def evaluation_table(counts_by_method: Mapping[str, Sequence[PerImageCounts]]) -> pd.DataFrame:
    """One row per method with mIoU, m̄IoU_c, m̄IoU_i, mDice and accuracy."""
    rows = {name: evaluate(counts) for name, counts in counts_by_method.items()}
    return pd.DataFrame.from_dict(rows, orient="index")


def write_tables(report: Report, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    targets = {
        "summary.csv": report.summary,
        "summary_rendered.csv": report.rendered(),
        "error_reduction.csv": report.error_reduction,
    }
    for name, frame in targets.items():
        path = directory / name
        frame.to_csv(path, index=name.startswith("summary"), float_format="%.4f")
        written.append(path)
    path = directory / "selection.csv"
    selection_frame(report.selection).to_csv(path, index=False, float_format="%.6g")
    written.append(path)
    return written


def plot_error_reduction(report: Report, path: str | Path) -> Path:
    df = report.error_reduction
    pivot = df.groupby(["column", "level"])["error_reduction"].mean().unstack("level")
    pivot = pivot.loc[sorted(pivot.index, key=column_sort_key)]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(pivot.index) + 2), 4))
    pivot.plot.bar(ax=ax)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("error reduction (%)")
    ax.set_xlabel("")
    ax.legend(title="level")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_entropy_scatter(table: ResultTable, column: str, selection: Selection, path: str | Path) -> Path:
    x, y = entropy_improvement_data(table, column, selection)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(x, y, s=10, alpha=0.6)
    try:
        slope, intercept = fit_line(x, y)
    except ValueError as e:
        logger.warning("no entropy fit for %s: %s", column, e)
    else:
        xs = np.linspace(x.min(), x.max(), 50)
        ax.plot(xs, slope * xs + intercept, color="tab:red", label=f"{slope:.2f}·H {intercept:+.2f}")
        ax.legend()
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("entropy before adaptation")
    ax.set_ylabel("m̄IoU_i gain")
    ax.set_title(column)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_iteration_curves(table: ResultTable, column: str, path: str | Path) -> Path:
    """Mean m̄IoU_i per iteration, one curve per learning rate."""
    df = table.frame()
    df = df[df["column"] == column]
    fig, ax = plt.subplots(figsize=(5, 4))
    for lr, group in sorted(df.groupby("lr"), key=lambda item: item[0]):
        curve = np.array(group["miou_i"].tolist(), dtype=np.float64).mean(axis=0)
        ax.plot(range(len(curve)), curve, marker="o", markersize=3, label=f"lr={lr:g}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean m̄IoU_i")
    ax.set_title(column)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_oracle_share(oracle: OracleResult, path: str | Path) -> Path:
    shares = oracle.shares()
    fig, ax = plt.subplots(figsize=(max(5.0, 0.5 * len(shares) + 2), 4))
    ax.bar(list(shares), [100.0 * v for v in shares.values()])
    ax.set_ylabel("images picked (%)")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def colorize(mask: np.ndarray, palette: np.ndarray | None = None) -> np.ndarray:
    if palette is None:
        palette = plt.get_cmap("tab10")(np.arange(10))[:, :3]
    out = palette[np.clip(mask, 0, len(palette) - 1) % len(palette)]
    out[mask == IGNORE_LABEL] = 1.0
    return out


def plot_mask_evolution(masks: Sequence[np.ndarray], path: str | Path, titles: Sequence[str] | None = None) -> Path:
    if not masks:
        raise ValueError("no masks to plot")
    titles = list(titles) if titles is not None else [f"t={i}" for i in range(len(masks))]
    fig, axes = plt.subplots(1, len(masks), figsize=(1.8 * len(masks), 2.0), squeeze=False)
    for ax, mask, title in zip(axes[0], masks, titles):
        ax.imshow(colorize(np.asarray(mask)), interpolation="nearest")
        ax.set_title(title, fontsize="small")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report(
    table: ResultTable,
    directory: str | Path,
    granularity: str = "overall",
    methods: Sequence[str] | None = None,
) -> Report:
    """Tables and figures for a stored grid.

    Oracle and entropy analyses use ``methods`` when given, otherwise the columns with a
    positive aggregate gain (all columns if none is positive).
    """
    if not len(table):
        raise ValueError("no results to report")
    directory = Path(directory)
    tables, figures = directory / "tables", directory / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    selection = select_hparams(table, granularity)  # type: ignore[arg-type]
    report = aggregate_report(table, selection)
    write_tables(report, tables)
    plot_error_reduction(report, figures / "error_reduction.png")

    analysed = list(methods) if methods else positive_methods(report) or list(report.summary.columns)
    scores = selected_scores(table, selection)
    oracle = oracle_select({c: scores[c] for c in analysed}, na_scores(table))
    pd.DataFrame({"method": pd.Series(oracle.assignment), "score": pd.Series(oracle.scores)}).to_csv(
        tables / "oracle.csv", index_label="image_id", float_format="%.4f"
    )
    plot_oracle_share(oracle, figures / "oracle_share.png")
    fits = []
    for column in analysed:
        plot_iteration_curves(table, column, figures / f"iterations_{_slug(column)}.png")
        plot_entropy_scatter(table, column, selection, figures / f"entropy_{_slug(column)}.png")
        try:
            slope, intercept = fit_line(*entropy_improvement_data(table, column, selection))
        except ValueError:
            continue
        fits.append({"column": column, "slope": slope, "intercept": intercept})
    pd.DataFrame(fits, columns=["column", "slope", "intercept"]).to_csv(
        tables / "entropy_fit.csv", index=False, float_format="%.6f"
    )
    logger.info("report for %d rows written to %s", len(table), directory)
    return report
