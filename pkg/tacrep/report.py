"""Informe de resultados: resumen por celda, curvas métrica-vs-presupuesto y mejora SSL frente a E2E."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from .errors import ConfigError
from .metrics import RESULT_COLUMNS, goodness

logger = logging.getLogger(__name__)

IMPROVEMENT_BUDGETS: Tuple[float, float] = (0.33, 0.5)
RECIPE = "media sobre tareas de la mejora relativa del mejor SSL frente a E2E con presupuesto 33–50 %"
SUMMARY_KEYS = ["task", "model", "tuning", "budget", "metric"]


@dataclass
class ReportResult:
    summary_path: Path
    plots: List[Path] = field(default_factory=list)
    improvement: Optional[float] = None
    per_task: Dict[str, float] = field(default_factory=dict)


def load_results(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no existe {path}")
    table = pd.read_csv(path)
    missing = [c for c in RESULT_COLUMNS if c not in table.columns]
    if missing:
        raise ConfigError(f"{path}: faltan columnas {missing}")
    if table.empty:
        raise ConfigError(f"{path}: sin filas")
    return table


def summarize(table: pd.DataFrame) -> pd.DataFrame:
    """Media sobre semillas por (tarea, modelo, ajuste, presupuesto, métrica)."""
    grouped = table.groupby(SUMMARY_KEYS, sort=True)
    summary = grouped.agg(
        value=("value", "mean"),
        ci_lo=("ci_lo", "mean"),
        ci_hi=("ci_hi", "mean"),
        n_seeds=("seed", "nunique"),
        n_eval=("n_eval", "sum"),
    ).reset_index()
    summary["goodness"] = [goodness(m, v) for m, v in zip(summary["metric"], summary["value"])]
    return summary


def improvement_over_e2e(summary: pd.DataFrame, budgets: Tuple[float, float] = IMPROVEMENT_BUDGETS) -> Tuple[Optional[float], Dict[str, float]]:
    """Mejora relativa (en %) del mejor SSL frente a E2E, promediada por presupuesto y luego por tarea.

    Devuelve (None, {}) si no hay filas E2E.
    """
    lo, hi = budgets
    window = summary[(summary["budget"] >= lo - 1e-9) & (summary["budget"] <= hi + 1e-9)]
    if not (summary["model"] == "e2e").any():
        return None, {}
    per_task: Dict[str, float] = {}
    for task, rows in window.groupby("task", sort=True):
        gains = []
        for budget, at in rows.groupby("budget", sort=True):
            e2e = at[at["model"] == "e2e"]["goodness"]
            ssl = at[at["model"] != "e2e"]["goodness"]
            if e2e.empty or ssl.empty or e2e.mean() <= 0:
                continue
            gains.append(100.0 * (ssl.max() / e2e.mean() - 1.0))
        if gains:
            per_task[str(task)] = float(np.mean(gains))
    if not per_task:
        return None, {}
    return float(np.mean(list(per_task.values()))), per_task


def plot_task(summary: pd.DataFrame, task: str, out_dir: Path) -> Path:
    rows = summary[summary["task"] == task]
    fig, ax = plt.subplots(figsize=(6, 4))
    for (model, tuning), curve in rows.groupby(["model", "tuning"], sort=True):
        curve = curve.sort_values("budget")
        x = curve["budget"].to_numpy() * 100.0
        ax.plot(x, curve["value"], marker="o", label=f"{model} ({tuning})")
        ax.fill_between(x, curve["ci_lo"], curve["ci_hi"], alpha=0.2)
    ax.set_xscale("log")
    ax.set_xlabel("datos etiquetados (%)")
    ax.set_ylabel(str(rows["metric"].iloc[0]))
    ax.set_title(f"{task}: métrica frente a presupuesto")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize="small")
    path = Path(out_dir) / f"{task}_budget.png"
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_table(summary: pd.DataFrame, improvement: Optional[float], per_task: Dict[str, float]) -> Table:
    table = Table(title="TacBench: resumen", caption=f"Mejora: {RECIPE}" if improvement is not None else "Mejora omitida: no hay filas E2E")
    for col in ("task", "model", "tuning", "budget", "metric", "value", "IC 95 %"):
        table.add_column(col, justify="right" if col in ("budget", "value") else "left")
    if improvement is not None:
        table.add_column("mejora tarea", justify="right")
    for row in summary.itertuples(index=False):
        cells = [row.task, row.model, row.tuning, f"{row.budget:.2f}", row.metric, f"{row.value:.4g}", f"[{row.ci_lo:.4g}, {row.ci_hi:.4g}]"]
        if improvement is not None:
            gain = per_task.get(row.task)
            cells.append(f"{gain:+.1f} %" if gain is not None else "")
        table.add_row(*cells)
    if improvement is not None:
        table.add_section()
        table.add_row("media", "", "", "", "", "", "", f"{improvement:+.1f} %")
    return table


def report(results_path: Path, out_dir: Path, console: Optional[Console] = None) -> ReportResult:
    """Escribe summary.csv y `<task>_budget.png`; imprime la tabla resumen."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(load_results(results_path))
    improvement, per_task = improvement_over_e2e(summary)
    if improvement is None:
        logger.warning("sin filas E2E comparables: se omite la columna de mejora")
    exported = summary.copy()
    if improvement is not None:
        exported["improvement_pct"] = [per_task.get(t, np.nan) for t in exported["task"]]
    summary_path = out_dir / "summary.csv"
    exported.to_csv(summary_path, index=False)
    plots = [plot_task(summary, task, out_dir) for task in sorted(summary["task"].unique())]
    (console or Console()).print(render_table(summary, improvement, per_task))
    return ReportResult(summary_path=summary_path, plots=plots, improvement=improvement, per_task=per_task)
