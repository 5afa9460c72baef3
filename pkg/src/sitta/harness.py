"""Hyper-parameter grid, result storage, selection and analysis.

Every (image, config) pair is adapted once with the full iteration budget. Rows keep the
per-iteration m̄IoU_i trace, so any iteration count up to the budget is evaluated post hoc
by indexing into the trace instead of re-running.
"""
from __future__ import annotations

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from . import storage
from .core import IGNORE_LABEL, MissingAuxiliaryError, ModelAdapter
from .metrics import error_reduction
from .tta import MAX_ITERATIONS, AuxModels, Method, TTAConfig, adapt_single_image

logger = logging.getLogger(__name__)

Granularity = Literal["overall", "per-corruption", "per-level"]
GRANULARITIES: tuple[str, ...] = ("overall", "per-corruption", "per-level")
METHOD_ORDER = [m.value for m in Method]
COLUMN_ORDER_LOSS = ["ent", "ce", "iou", "kl", "none"]
COLUMN_ORDER_SCOPE = ["full", "norm-affine"]


def _column(row: Mapping) -> str:
    return f"{row['method']}/{row['loss']}/{row['scope']}"


def column_sort_key(column: str) -> tuple[int, int, int]:
    method, loss, scope = column.split("/")
    return (METHOD_ORDER.index(method), COLUMN_ORDER_LOSS.index(loss), COLUMN_ORDER_SCOPE.index(scope))


@dataclass
class ResultTable:
    rows: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        rows, self.rows = self.rows, []
        self._keys: set[tuple[str, str]] = set()
        self._na: dict[str, tuple[float, float]] = {}
        for row in rows:
            self.add(row)

    def __len__(self) -> int:
        return len(self.rows)

    def add(self, row: dict) -> None:
        key = (row["image_id"], row["config"])
        if key in self._keys:
            raise ValueError(f"duplicate result row for image {key[0]!r} and config {key[1]!r}")
        na = (float(row["na_miou_i"]), float(row["na_entropy"]))
        seen = self._na.setdefault(row["image_id"], na)
        if not (math.isclose(seen[0], na[0], abs_tol=1e-6) and math.isclose(seen[1], na[1], abs_tol=1e-6)):
            raise ValueError(f"inconsistent unadapted values for image {row['image_id']!r}")
        self._keys.add(key)
        self.rows.append(row)

    @property
    def keys(self) -> set[tuple[str, str]]:
        return set(self._keys)

    @property
    def image_ids(self) -> list[str]:
        return sorted(self._na)

    @property
    def budget(self) -> int:
        return max((len(r["miou_i"]) - 1 for r in self.rows), default=0)

    def sorted_rows(self) -> list[dict]:
        return sorted(self.rows, key=lambda r: (r["image_id"], r["config"]))

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.sorted_rows())
        if not df.empty:
            df["column"] = [_column(r) for r in df.to_dict("records")]
        return df

    def truncated(self, iterations: int) -> "ResultTable":
        """Rows cut to ``iterations`` updates, as if run with that budget."""
        out = []
        for r in self.rows:
            cut = dict(r)
            cut["miou_i"] = list(r["miou_i"][: iterations + 1])
            cut["entropy"] = list(r["entropy"][: iterations + 1])
            out.append(cut)
        return ResultTable(out)

    def to_jsonl(self, path: str | Path) -> Path:
        return storage.write_jsonl(path, self.sorted_rows(), schema="result_row")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ResultTable":
        return cls(list(storage.read_jsonl(path, schema="result_row")))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        budget = self.budget
        flat = []
        for r in self.sorted_rows():
            row = {k: v for k, v in r.items() if k not in ("miou_i", "entropy")}
            for i in range(budget + 1):
                row[f"miou_i_{i}"] = r["miou_i"][i] if i < len(r["miou_i"]) else None
                row[f"entropy_{i}"] = r["entropy"][i] if i < len(r["entropy"]) else None
            flat.append(row)
        pd.DataFrame(flat).to_csv(path, index=False, float_format="%.8f")
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "ResultTable":
        df = pd.read_csv(path)
        mi = sorted((c for c in df.columns if c.startswith("miou_i_")), key=lambda c: int(c.rsplit("_", 1)[1]))
        en = sorted((c for c in df.columns if c.startswith("entropy_")), key=lambda c: int(c.rsplit("_", 1)[1]))
        rows = []
        for rec in df.to_dict("records"):
            row = {k: v for k, v in rec.items() if k not in mi and k not in en}
            row["miou_i"] = [float(rec[c]) for c in mi if not pd.isna(rec[c])]
            row["entropy"] = [float(rec[c]) for c in en if not pd.isna(rec[c])]
            row["level"] = int(row["level"])
            row["diverged"] = bool(row["diverged"])
            row["image_id"] = str(row["image_id"])
            rows.append(row)
        return cls(rows)


class ResultStore:
    """Append-only JSON-lines store with a single writer; CSV is exported sorted."""

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.jsonl = self.directory / "results.jsonl"
        self.csv = self.directory / "results.csv"
        self._lock = threading.Lock()

    def completed(self) -> set[tuple[str, str]]:
        if not self.jsonl.is_file():
            return set()
        return {(r["image_id"], r["config"]) for r in storage.read_jsonl(self.jsonl)}

    def append(self, row: dict) -> None:
        with self._lock:
            storage.append_jsonl(self.jsonl, row, schema="result_row")

    def table(self) -> ResultTable:
        if not self.jsonl.is_file():
            return ResultTable()
        seen: set[tuple[str, str]] = set()
        rows = []
        for r in storage.read_jsonl(self.jsonl, schema="result_row"):
            key = (r["image_id"], r["config"])
            if key not in seen:
                seen.add(key)
                rows.append(r)
        return ResultTable(rows)

    def export(self) -> ResultTable:
        table = self.table()
        table.to_csv(self.csv)
        return table


@dataclass(frozen=True)
class CorpusSample:
    sample_id: str
    kind: str
    level: int
    image: torch.Tensor
    gt: np.ndarray


def _needs(cfg: TTAConfig, aux: AuxModels | None) -> str | None:
    if cfg.method is Method.REF and (aux is None or aux.refiner is None):
        return "refiner"
    if cfg.method is Method.DIOU and (aux is None or aux.estimator is None):
        return "IoU estimator"
    return None


def runnable_configs(configs: Iterable[TTAConfig], aux: AuxModels | None) -> list[TTAConfig]:
    out = []
    for cfg in configs:
        missing = _needs(cfg, aux)
        if missing:
            logger.warning("skipping %s: no %s available", cfg.key, missing)
            continue
        out.append(cfg)
    return out


def scorable_samples(corpus: Iterable[CorpusSample]) -> list[CorpusSample]:
    """Drop samples whose mask is entirely ignore label; their m̄IoU_i is undefined."""
    out = []
    for sample in corpus:
        if not (np.asarray(sample.gt) != IGNORE_LABEL).any():
            logger.warning("skipping %s: every pixel carries the ignore label", sample.sample_id)
            continue
        out.append(sample)
    return out


def plan_jobs(
    corpus: Sequence[CorpusSample], configs: Sequence[TTAConfig], done: set[tuple[str, str]] | None = None
) -> list[tuple[CorpusSample, TTAConfig]]:
    done = done or set()
    return [(s, c) for s in corpus for c in configs if (s.sample_id, c.key) not in done]


def grid_search(
    corpus: Sequence[CorpusSample],
    model: ModelAdapter,
    configs: Sequence[TTAConfig],
    aux: AuxModels | None = None,
    budget: int = MAX_ITERATIONS,
    store: ResultStore | None = None,
    workers: int = 1,
    progress: bool = False,
) -> ResultTable:
    """Adapt every (image, config) once with ``budget`` iterations.

    With a ``store``, rows already present are skipped and new rows are appended as they
    finish, which makes interrupted runs resumable.
    """
    if not 0 <= budget <= MAX_ITERATIONS:
        raise ValueError(f"iteration budget must lie in [0, {MAX_ITERATIONS}]")
    configs = [replace(c, iterations=budget) for c in runnable_configs(configs, aux)]
    done = store.completed() if store else set()
    jobs = plan_jobs(scorable_samples(corpus), configs, done)
    if done:
        logger.info("resuming: %d rows already stored, %d jobs left", len(done), len(jobs))

    def run(job, replica: ModelAdapter) -> dict:
        sample, cfg = job
        record = adapt_single_image(replica, sample.image, cfg, aux, gt=sample.gt, image_id=sample.sample_id)
        return record.to_row(sample.kind, sample.level)

    table = store.table() if store else ResultTable()
    bar = tqdm(total=len(jobs), disable=not progress, desc="grid")

    def collect(row: dict) -> None:
        table.add(row)
        if store:
            store.append(row)
        bar.update(1)

    if workers <= 1:
        for job in jobs:
            collect(run(job, model))
    else:
        local = threading.local()

        def run_threaded(job):
            if not hasattr(local, "replica"):
                local.replica = model.replica()
            return run(job, local.replica)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for row in pool.map(run_threaded, jobs):
                collect(row)
    bar.close()
    if store:
        store.export()
    return table


def _cell(row: Mapping, granularity: str) -> str:
    if granularity == "overall":
        return "all"
    if granularity == "per-corruption":
        return str(row["kind"])
    if granularity == "per-level":
        return f"L{int(row['level'])}"
    raise ValueError(f"unknown granularity {granularity!r}; expected one of {', '.join(GRANULARITIES)}")


@dataclass(frozen=True)
class Choice:
    column: str
    cell: str
    config: str
    lr: float
    iterations: int
    score: float


@dataclass(frozen=True)
class Selection:
    granularity: str
    choices: dict[tuple[str, str], Choice]

    def choice_for(self, row: Mapping) -> Choice:
        return self.choices[(_column(row), _cell(row, self.granularity))]

    def columns(self) -> list[str]:
        return sorted({c for c, _ in self.choices}, key=column_sort_key)


def select_hparams(table: ResultTable, granularity: Granularity = "overall") -> Selection:
    """Best (config, iteration count) by mean m̄IoU_i within each (column, cell).

    Ties go to fewer iterations, then the lower learning rate.
    """
    if not len(table):
        raise ValueError("cannot select hyper-parameters from an empty table")
    groups: dict[tuple[str, str], dict[str, list[dict]]] = {}
    for row in table.sorted_rows():
        groups.setdefault((_column(row), _cell(row, granularity)), {}).setdefault(row["config"], []).append(row)
    choices = {}
    for (column, cell), by_config in groups.items():
        best = None
        for config, rows in by_config.items():
            scores = np.array([r["miou_i"] for r in rows], dtype=np.float64)
            means = scores.mean(axis=0)
            budget = scores.shape[1] - 1
            lr = float(rows[0]["lr"])
            for k in range(1, budget + 1) if budget > 0 else [0]:
                cand = (-float(means[k]), k, lr, config)
                if best is None or cand < best:
                    best = cand
        if best is None:
            raise ValueError(f"empty selection cell {cell!r} for {column}")
        choices[(column, cell)] = Choice(column, cell, best[3], best[2], best[1], -best[0])
    return Selection(granularity, choices)


def selected_scores(table: ResultTable, selection: Selection) -> dict[str, dict[str, float]]:
    """column -> image -> m̄IoU_i of the selected config at its selected iteration count."""
    out: dict[str, dict[str, float]] = {}
    for row in table.sorted_rows():
        choice = selection.choice_for(row)
        if row["config"] == choice.config:
            out.setdefault(choice.column, {})[row["image_id"]] = float(row["miou_i"][choice.iterations])
    return out


def na_scores(table: ResultTable) -> dict[str, float]:
    return {r["image_id"]: float(r["na_miou_i"]) for r in table.rows}


def selection_mean(table: ResultTable, selection: Selection, column: str) -> float:
    scores = selected_scores(table, selection).get(column)
    if not scores:
        raise ValueError(f"no rows for column {column}")
    return float(np.mean(list(scores.values())))


@dataclass(frozen=True)
class OracleResult:
    assignment: dict[str, str]
    scores: dict[str, float]
    aggregate: float

    def shares(self) -> dict[str, float]:
        counts = pd.Series(list(self.assignment.values())).value_counts(normalize=True)
        return {k: float(v) for k, v in counts.sort_index().items()}


def oracle_select(
    method_scores: Mapping[str, Mapping[str, float]], na: Mapping[str, float] | None = None
) -> OracleResult:
    """Per image, the best method in hindsight (no adaptation included when ``na`` is given)."""
    candidates = dict(method_scores)
    if na is not None:
        candidates = {"NA": na, **candidates}
    if not candidates:
        raise ValueError("at least one method is required")
    image_sets = {name: set(s) for name, s in candidates.items()}
    reference = next(iter(image_sets.values()))
    for name, ids in image_sets.items():
        if ids != reference:
            raise ValueError(f"method {name!r} covers a different image set")
    assignment, best = {}, {}
    for image_id in sorted(reference):
        name, score = max(((n, s[image_id]) for n, s in candidates.items()), key=lambda item: item[1])
        assignment[image_id] = name
        best[image_id] = float(score)
    return OracleResult(assignment, best, float(np.mean(list(best.values()))))


def fit_line(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Ordinary least squares ``y = slope * x + intercept``."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.size < 2:
        raise ValueError("need at least two (x, y) points of equal length")
    if np.ptp(xa) == 0:
        raise ValueError("x is constant; the line is undefined")
    slope, intercept = np.polyfit(xa, ya, 1)
    return float(slope), float(intercept)


def entropy_improvement_data(
    table: ResultTable, column: str, selection: Selection | None = None
) -> tuple[np.ndarray, np.ndarray]:
    selection = selection or select_hparams(table, "overall")
    scores = selected_scores(table, selection).get(column, {})
    na = {r["image_id"]: (float(r["na_entropy"]), float(r["na_miou_i"])) for r in table.rows}
    ids = sorted(scores)
    x = np.array([na[i][0] for i in ids])
    y = np.array([scores[i] - na[i][1] for i in ids])
    return x, y


def entropy_improvement_fit(
    table: ResultTable, column: str, selection: Selection | None = None
) -> tuple[float, float]:
    """Least-squares line of m̄IoU_i gain (TTA - NA) against the unadapted entropy."""
    x, y = entropy_improvement_data(table, column, selection)
    return fit_line(x, y)


@dataclass
class Report:
    summary: pd.DataFrame  # index NA / TTA / Δ_ABS, one column per method/loss/scope
    error_reduction: pd.DataFrame  # long form: column, kind, level, na, tta, error_reduction
    selection: Selection

    def rendered(self, digits: int = 2) -> pd.DataFrame:
        """Summary as text; columns that never beat NA show TTA = NA and Δ = -ε."""
        out = self.summary.copy().astype(object)
        for col in self.summary.columns:
            na, tta, delta = self.summary.loc["NA", col], self.summary.loc["TTA", col], self.summary.loc["Δ_ABS", col]
            out.loc["NA", col] = f"{na:.{digits}f}"
            if delta < 0:
                out.loc["TTA", col] = f"{na:.{digits}f}"
                out.loc["Δ_ABS", col] = "-ε"
            else:
                out.loc["TTA", col] = f"{tta:.{digits}f}"
                out.loc["Δ_ABS", col] = f"{delta:.{digits}f}"
        return out


def aggregate_report(table: ResultTable, selection: Selection) -> Report:
    scores = selected_scores(table, selection)
    na = na_scores(table)
    meta = {r["image_id"]: (r["kind"], int(r["level"])) for r in table.rows}
    summary = {}
    er_rows = []
    for column in sorted(scores, key=column_sort_key):
        ids = sorted(scores[column])
        na_mean = float(np.mean([na[i] for i in ids]))
        tta_mean = float(np.mean([scores[column][i] for i in ids]))
        summary[column] = {"NA": na_mean, "TTA": tta_mean, "Δ_ABS": tta_mean - na_mean}
        cells: dict[tuple[str, int], list[str]] = {}
        for i in ids:
            cells.setdefault(meta[i], []).append(i)
        for (kind, level), members in sorted(cells.items()):
            cell_na = float(np.mean([na[i] for i in members]))
            cell_tta = float(np.mean([scores[column][i] for i in members]))
            er = error_reduction(cell_na, cell_tta) if cell_na < 100.0 else 0.0
            er_rows.append(
                {"column": column, "kind": kind, "level": level, "na": cell_na, "tta": cell_tta, "error_reduction": er}
            )
    summary_df = pd.DataFrame(summary, index=["NA", "TTA", "Δ_ABS"])
    er_df = pd.DataFrame(er_rows, columns=["column", "kind", "level", "na", "tta", "error_reduction"])
    return Report(summary_df, er_df, selection)


def positive_methods(report: Report) -> list[str]:
    return [c for c in report.summary.columns if report.summary.loc["Δ_ABS", c] > 0]
