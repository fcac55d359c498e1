"""MAE/RMSE per report cell in the normalized domain, plus table rendering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .engine import PLANS, ForecastRun, read_runs

LEVELS = ("Station", "Region", "City")
CELL_COLUMNS = ["dataset", "model", "level", "plan", "step", "mae", "rmse", "n"]


class ReportError(ValueError):
    pass


def _check(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.size != a.size:
        raise ReportError(f"length mismatch: {p.size} predictions vs {a.size} actuals")
    if p.size == 0:
        raise ReportError("cannot score an empty sample")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
        raise ReportError("non-finite values in a scored sample")
    return p, a


def mae(pred, actual) -> float:
    p, a = _check(pred, actual)
    return float(np.mean(np.abs(p - a)))


def rmse(pred, actual) -> float:
    p, a = _check(pred, actual)
    d = np.abs(p - a)
    top = d.max()
    if top == 0.0:
        return 0.0
    # scaled so tiny errors do not underflow when squared
    return float(top * np.sqrt(np.mean((d / top) ** 2)))


@dataclass(frozen=True)
class MetricCell:
    dataset: str
    model: str
    level: str
    plan: str
    step: int
    mae: float
    rmse: float
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ReportError("a cell needs at least one sample")
        # Jensen: mae <= rmse, up to the rounding of the two reductions
        if not 0.0 <= self.mae <= self.rmse * (1 + 1e-12) + 1e-300:
            raise ReportError(f"cell violates 0 <= mae <= rmse: {self}")

    @property
    def key(self) -> tuple:
        return (self.dataset, self.model, self.level, self.plan, self.step)


def cellize(runs: Iterable[ForecastRun], models: Sequence[str] | None = None) -> list[MetricCell]:
    """Pool every (origin, step) error of a (dataset, model, level, plan, step) key and score it.

    Station and Region cells therefore micro-average over their entities.
    """
    pooled: dict[tuple, list[tuple[np.ndarray, np.ndarray]]] = {}
    for r in runs:
        for k in range(r.predictions.shape[1]):
            key = (r.city, r.model, r.level.value, r.plan, k + 1)
            pooled.setdefault(key, []).append((r.predictions[:, k], r.actuals[:, k]))
    cells = []
    for key in sorted(pooled):
        p = np.concatenate([x for x, _ in pooled[key]])
        a = np.concatenate([y for _, y in pooled[key]])
        if p.size == 0:
            raise ReportError(f"cell {key} has no forecast origins")
        cells.append(MetricCell(*key, mae(p, a), rmse(p, a), int(p.size)))
    check_grid(cells, models)
    return cells


def check_grid(cells: Sequence[MetricCell], models: Sequence[str] | None = None) -> None:
    """Every dataset/plan present must have every model x level x step."""
    have = {c.key for c in cells}
    model_set = sorted(set(models) if models else {c.model for c in cells})
    missing = []
    for dataset, plan in sorted({(c.dataset, c.plan) for c in cells}):
        n_steps = PLANS[plan].n_steps if plan in PLANS else max(c.step for c in cells if c.plan == plan)
        for m in model_set:
            for lv in LEVELS:
                for s in range(1, n_steps + 1):
                    if (dataset, m, lv, plan, s) not in have:
                        missing.append(f"{dataset}/{m}/{lv}/{plan}/step{s}")
    if missing:
        raise ReportError("incomplete cell grid; missing " + ", ".join(missing[:10])
                          + (f" and {len(missing) - 10} more" if len(missing) > 10 else ""))


# -- emission ------------------------------------------------------------------------


def header_block(settings: Mapping[str, object]) -> list[str]:
    lines = [f"{k}: {settings[k]}" for k in sorted(settings)]
    lines.append("aggregation: micro-average over pooled (entity, origin) errors at Station and Region")
    lines.append("domain: z-score normalized values, no inverse transform")
    return lines


def cells_to_csv(cells: Sequence[MetricCell], settings: Mapping[str, object] | None = None) -> str:
    buf = io.StringIO()
    for line in header_block(settings or {}):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CELL_COLUMNS)
    for c in sorted(cells, key=lambda c: c.key):
        w.writerow([c.dataset, c.model, c.level, c.plan, c.step, repr(c.mae), repr(c.rmse), c.n])
    return buf.getvalue()


def cells_from_csv(text: str) -> list[MetricCell]:
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader)
    if header != CELL_COLUMNS:
        raise ReportError(f"unexpected metric columns {header}")
    return [MetricCell(d, m, lv, p, int(s), float(a), float(r), int(n)) for d, m, lv, p, s, a, r, n in reader]


def best_markers(cells: Sequence[MetricCell]) -> set[tuple[tuple, str]]:
    """(cell key, metric) pairs holding the minimum of their (dataset, level, plan, step, metric) column.

    Full-precision values are compared; ties mark every minimum.
    """
    groups: dict[tuple, list[MetricCell]] = {}
    for c in cells:
        groups.setdefault((c.dataset, c.level, c.plan, c.step), []).append(c)
    marks = set()
    for members in groups.values():
        for metric in ("mae", "rmse"):
            low = min(getattr(c, metric) for c in members)
            marks.update((c.key, metric) for c in members if getattr(c, metric) == low)
    return marks


def _fmt(v: float, bold: bool) -> str:
    s = f"{v:.2f}"
    return f"**{s}**" if bold else s


def render_markdown(cells: Sequence[MetricCell], plan: str, settings: Mapping[str, object] | None = None,
                    models: Sequence[str] | None = None) -> str:
    """One table per plan: rows model x dataset x metric, columns step x level."""
    cells = [c for c in cells if c.plan == plan]
    if not cells:
        raise ReportError(f"no cells for plan {plan}")
    check_grid(cells, models)
    by_key = {c.key: c for c in cells}
    marks = best_markers(cells)
    labels = PLANS[plan].step_labels if plan in PLANS else None
    steps = sorted({c.step for c in cells})
    model_order = list(models) if models else sorted({c.model for c in cells})
    datasets = sorted({c.dataset for c in cells})

    out = [f"# {plan}-term forecasting results", ""]
    out += [f"- {line}" for line in header_block(settings or {})]
    out += ["- bold marks the lowest value per column within a dataset; lower is better", ""]
    head = ["Model", "Dataset", "Metric"]
    for s in steps:
        step_name = labels[s - 1] if labels else f"step {s}"
        head += [f"{step_name} {lv}" for lv in LEVELS]
    out.append("| " + " | ".join(head) + " |")
    out.append("|" + "---|" * len(head))
    for m in model_order:
        for d in datasets:
            for metric in ("mae", "rmse"):
                row = [m, d, metric.upper()]
                for s in steps:
                    for lv in LEVELS:
                        c = by_key[(d, m, lv, plan, s)]
                        row.append(_fmt(getattr(c, metric), (c.key, metric) in marks))
                out.append("| " + " | ".join(row) + " |")
    return "\n".join(out) + "\n"


def write_reports(cells: Sequence[MetricCell], out_dir: str | Path, settings: Mapping[str, object] | None = None,
                  models: Sequence[str] | None = None) -> list[Path]:
    """``metrics.csv`` plus one ``report_<city>_<plan>.md`` per dataset and plan."""
    out_dir = Path(out_dir)
    written = [out_dir / "metrics.csv"]
    written[0].write_text(cells_to_csv(cells, settings), encoding="utf-8")
    for d, p in sorted({(c.dataset, c.plan) for c in cells}):
        path = out_dir / f"report_{d}_{p}.md"
        path.write_text(render_markdown([c for c in cells if c.dataset == d], p, settings, models), encoding="utf-8")
        written.append(path)
    return written


def recompute(run_csvs: Iterable[str | Path], models: Sequence[str] | None = None) -> list[MetricCell]:
    runs: list[ForecastRun] = []
    for path in run_csvs:
        runs.extend(read_runs(path))
    return cellize(runs, models)


def is_finite_grid(cells: Sequence[MetricCell]) -> bool:
    return all(math.isfinite(c.mae) and math.isfinite(c.rmse) for c in cells)
