"""Métricas de TacBench e intervalos de confianza por bootstrap."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, mean_squared_error

from .errors import ConfigError

logger = logging.getLogger(__name__)

BOOTSTRAP_RESAMPLES = 1000
RESULT_COLUMNS: List[str] = ["task", "model", "tuning", "budget", "seed", "metric", "value", "ci_lo", "ci_hi", "n_eval"]
LOWER_IS_BETTER = {"RMSE_mN"}


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    ci_lo: float
    ci_hi: float
    budget: float = 1.0
    n_eval: int = 0
    model: str = "ssl"
    tuning: str = "frozen"
    seed: int = 0

    def __post_init__(self):
        if not self.ci_lo <= self.value <= self.ci_hi:
            raise ConfigError(f"IC ({self.ci_lo}, {self.ci_hi}) no contiene el valor {self.value}")

    @property
    def ci95(self) -> Tuple[float, float]:
        return self.ci_lo, self.ci_hi

    def as_row(self) -> Dict[str, object]:
        return {
            "task": self.task,
            "model": self.model,
            "tuning": self.tuning,
            "budget": self.budget,
            "seed": self.seed,
            "metric": self.metric,
            "value": self.value,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n_eval": self.n_eval,
        }


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    """RMSE por eje promediado sobre los ejes."""
    pred = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    if pred.shape != target.shape or pred.shape[0] == 0:
        raise ConfigError("rmse requiere arrays no vacíos de igual forma")
    per_axis = mean_squared_error(target, pred, multioutput="raw_values")
    return float(np.mean(np.sqrt(per_axis)))


def force_rmse_mn(pred_n: np.ndarray, target_n: np.ndarray) -> float:
    return 1000.0 * rmse(pred_n, target_n)


def f1(pred: np.ndarray, target: np.ndarray) -> float:
    """F1 de la clase positiva (deslizamiento)."""
    if len(target) == 0:
        raise ConfigError("f1 sobre un conjunto vacío")
    return float(f1_score(np.asarray(target), np.asarray(pred), pos_label=1, zero_division=0))


def accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    if len(target) == 0:
        raise ConfigError("accuracy sobre un conjunto vacío")
    return float(accuracy_score(np.asarray(target), np.asarray(pred)))


def bootstrap_ci(
    score: Callable[[np.ndarray], float],
    n: int,
    rng: np.random.Generator,
    n_resamples: int = BOOTSTRAP_RESAMPLES,
    level: float = 0.95,
) -> Tuple[float, float, float]:
    """(valor, lo, hi) por bootstrap no paramétrico de percentiles.

    `score` recibe un array de índices de ejemplo. El intervalo se amplía si
    hace falta para contener el valor puntual.
    """
    if n == 0:
        raise ConfigError("conjunto de evaluación vacío")
    value = float(score(np.arange(n)))
    samples = np.array([score(rng.integers(0, n, size=n)) for _ in range(n_resamples)], dtype=np.float64)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(samples, [tail, 100.0 - tail])
    return value, float(min(lo, value)), float(max(hi, value))


def goodness(metric: str, value: float) -> float:
    """Valor orientado a «más es mejor» (RMSE se invierte)."""
    if metric in LOWER_IS_BETTER:
        return 1.0 / value if value > 0 else float("inf")
    return value
