"""Registro de tareas TacBench T1–T5: cabezas, pérdidas, objetivos y métrica de cada una."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .labels import DEFAULT_BINNING, POSE_DOFS, BinningSpec, normalize_forces, poses_to_classes
from .metrics import accuracy, f1, force_rmse_mn

DEFAULT_FMAX_N: Tuple[float, float, float] = (5.0, 5.0, 5.0)
HISTORY_OFFSET = 5


class TaskId(str, Enum):
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    T4 = "T4"
    T5 = "T5"


class Tuning(str, Enum):
    FROZEN = "frozen"
    PARTIAL = "partial"
    FULL = "full"


@dataclass
class TaskContext:
    fmax: Tuple[float, float, float] = DEFAULT_FMAX_N
    binning: Dict[str, BinningSpec] = field(default_factory=lambda: dict(DEFAULT_BINNING))
    n_textiles: int = 20

    def __post_init__(self):
        self.fmax = tuple(float(v) for v in self.fmax)
        if len(self.fmax) != 3 or min(self.fmax) <= 0:
            raise ConfigError("fmax debe tener 3 componentes positivas")


@dataclass
class HeadSpec:
    name: str
    out_dim: int
    loss: str  # "l1" | "ce"


Labels = List[Dict[str, object]]
Targets = Dict[str, np.ndarray]


@dataclass
class TaskSpec:
    task: TaskId
    description: str
    heads: List[HeadSpec]
    metric: str
    required_labels: Tuple[str, ...]
    build_targets: Callable[[Labels, TaskContext], Targets]
    score: Callable[[Dict[str, np.ndarray], Targets, TaskContext], float]
    class_key: Optional[str] = None
    history: bool = False

    def check_labels(self, labels: Labels) -> None:
        if not labels:
            raise ConfigError(f"{self.task.value}: no hay ventanas etiquetadas")
        missing = [k for k in self.required_labels if any(k not in lab for lab in labels)]
        if missing:
            raise ConfigError(f"{self.task.value}: faltan etiquetas {missing}")


def _stack(labels: Labels, key: str, dtype=np.float64) -> np.ndarray:
    return np.stack([np.asarray(lab[key], dtype=dtype) for lab in labels])


# ---------------------------------------------------------------------------
# Objetivos por tarea

def force_targets(labels: Labels, ctx: TaskContext) -> Targets:
    """`force` normalizada y recortada para la pérdida; `force_n` en newtons, sin recortar, para la métrica."""
    raw = _stack(labels, "force")
    return {"force": normalize_forces(raw, ctx.fmax), "force_n": raw}


def slip_targets(labels: Labels, ctx: TaskContext) -> Targets:
    return {
        "slip": _stack(labels, "slip", np.int64),
        "delta_force": normalize_forces(_stack(labels, "delta_force"), ctx.fmax),
    }


def pose_targets(labels: Labels, ctx: TaskContext) -> Targets:
    poses = _stack(labels, "pose")
    return {dof: poses_to_classes(poses[:, i], ctx.binning[dof]) for i, dof in enumerate(POSE_DOFS)}


def grasp_targets(labels: Labels, ctx: TaskContext) -> Targets:
    return {"grasp": _stack(labels, "grasp_success", np.int64)}


def textile_targets(labels: Labels, ctx: TaskContext) -> Targets:
    textiles = _stack(labels, "textile_id", np.int64)
    if textiles.max(initial=0) >= ctx.n_textiles:
        raise ConfigError(f"textile_id fuera de [0, {ctx.n_textiles})")
    return {"textile": textiles}


# ---------------------------------------------------------------------------
# Puntuaciones (salidas del modelo ya en numpy)

def score_force(outputs: Dict[str, np.ndarray], targets: Targets, ctx: TaskContext) -> float:
    return force_rmse_mn(outputs["force"] * np.asarray(ctx.fmax), targets["force_n"])


def score_slip(outputs: Dict[str, np.ndarray], targets: Targets, ctx: TaskContext) -> float:
    return f1(np.argmax(outputs["slip"], axis=-1), targets["slip"])


def score_pose(outputs: Dict[str, np.ndarray], targets: Targets, ctx: TaskContext) -> float:
    return float(np.mean([accuracy(np.argmax(outputs[d], axis=-1), targets[d]) for d in POSE_DOFS]))


def _score_class(name: str) -> Callable[[Dict[str, np.ndarray], Targets, TaskContext], float]:
    def score(outputs: Dict[str, np.ndarray], targets: Targets, ctx: TaskContext) -> float:
        return accuracy(np.argmax(outputs[name], axis=-1), targets[name])

    return score


TASKS: Dict[TaskId, TaskSpec] = {
    TaskId.T1: TaskSpec(
        TaskId.T1, "fuerza 3D", [HeadSpec("force", 3, "l1")], "RMSE_mN", ("force",), force_targets, score_force
    ),
    TaskId.T2: TaskSpec(
        TaskId.T2,
        "deslizamiento + Δfuerza",
        [HeadSpec("slip", 2, "ce"), HeadSpec("delta_force", 3, "l1")],
        "F1",
        ("slip", "delta_force"),
        slip_targets,
        score_slip,
        class_key="slip",
    ),
    TaskId.T3: TaskSpec(
        TaskId.T3, "pose (Δx, Δy, Δθ)", [HeadSpec(d, 11, "ce") for d in POSE_DOFS], "accuracy", ("pose",), pose_targets, score_pose
    ),
    TaskId.T4: TaskSpec(
        TaskId.T4,
        "estabilidad de agarre",
        [HeadSpec("grasp", 2, "ce")],
        "accuracy",
        ("grasp_success",),
        grasp_targets,
        _score_class("grasp"),
        class_key="grasp",
        history=True,
    ),
    TaskId.T5: TaskSpec(
        TaskId.T5, "textiles", [HeadSpec("textile", 20, "ce")], "accuracy", ("textile_id",), textile_targets, _score_class("textile"), class_key="textile"
    ),
}


def get_task(task: object) -> TaskSpec:
    try:
        return TASKS[TaskId(task)]
    except ValueError:
        raise ConfigError(f"tarea desconocida: {task} (opciones: {[t.value for t in TaskId]})") from None


def stratify_values(spec: TaskSpec, targets: Targets) -> Optional[np.ndarray]:
    return targets[spec.class_key] if spec.class_key else None


def select_rows(targets: Targets, idx: Sequence[int]) -> Targets:
    idx = np.asarray(idx, dtype=np.int64)
    return {k: v[idx] for k, v in targets.items()}
