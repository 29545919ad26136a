"""Configuración de experimentos: presets, carga JSON y hash canónico."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

from .encoder import EncoderConfig, encoder_preset
from .errors import ConfigError
from .fields import FieldConfig
from .objectives import Objective, ObjectiveConfig
from .probe import ProbeConfig
from .schedules import ScheduleConfig
from .synth import SynthConfig
from .tasks import Tuning, get_task
from .utils import config_hash, parse_enum, to_jsonable

logger = logging.getLogger(__name__)

# Cabezas reducidas para el encoder tiny (escala de escritorio)
OBJECTIVE_PRESETS: Dict[str, Dict[str, Any]] = {
    "tiny": dict(
        decoder_dim=64,
        decoder_depth=2,
        decoder_heads=4,
        n_prototypes=256,
        head_hidden=128,
        head_bottleneck=32,
        predictor_dim=32,
        predictor_depth=2,
        predictor_heads=4,
    ),
}
WARMUP_FRACTION = 0.1


@dataclass
class ExperimentConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    encoder: str = "tiny"
    encoder_overrides: Dict[str, Any] = field(default_factory=dict)
    schedule: Dict[str, Any] = field(default_factory=dict)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    field_viz: FieldConfig = field(default_factory=FieldConfig)
    data: List[str] = field(default_factory=list)
    eval_data: List[str] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])
    deterministic: bool = False
    out_dir: str = "runs/default"
    steps: int = 200
    checkpoint_every: int = 50
    monitor_every: int = 25
    tasks: List[str] = field(default_factory=lambda: ["T1", "T2", "T3", "T4", "T5"])
    budgets: List[float] = field(default_factory=lambda: [1.0, 1 / 3, 0.1, 0.01])
    tunings: List[str] = field(default_factory=lambda: ["frozen"])
    e2e: bool = True
    test_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig.from_dict(self.objective)
        if isinstance(self.probe, dict):
            self.probe = ProbeConfig.from_dict(self.probe)
        if isinstance(self.field_viz, dict):
            self.field_viz = FieldConfig.from_dict(self.field_viz)
        self.seeds = [int(s) for s in self.seeds]
        self.budgets = [float(b) for b in self.budgets]
        self.tasks = [get_task(t).task.value for t in self.tasks]
        self.tunings = [parse_enum(Tuning, t).value for t in self.tunings]
        if not self.seeds:
            raise ConfigError("la lista de semillas no puede estar vacía")
        if self.steps < 0 or self.checkpoint_every < 1 or self.monitor_every < 1:
            raise ConfigError("steps >= 0, checkpoint_every >= 1 y monitor_every >= 1")
        if any(not 0.0 < b <= 1.0 for b in self.budgets):
            raise ConfigError(f"presupuestos fuera de (0,1]: {self.budgets}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction debe estar en (0,1)")

    @property
    def seed(self) -> int:
        return self.seeds[0]

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def encoder_config(self) -> EncoderConfig:
        overrides = dict(self.encoder_overrides)
        if self.objective.objective is Objective.VJEPA:
            overrides.setdefault("mode", "CLIP")
        return encoder_preset(self.encoder, **overrides)

    def schedule_config(self) -> ScheduleConfig:
        """Valores por objetivo, con el horizonte medido en pasos salvo que se indique otro."""
        raw = self.objective.schedule_defaults()
        if "total_epochs" not in self.schedule and self.steps > 0:
            raw.update(total_epochs=self.steps, steps_per_epoch=1, warmup_epochs=int(self.steps * WARMUP_FRACTION))
        raw.update(self.schedule)
        unknown = set(raw) - {f.name for f in fields(ScheduleConfig)}
        if unknown:
            raise ConfigError(f"claves desconocidas en schedule: {sorted(unknown)}")
        return ScheduleConfig(**raw)

    def check_files(self) -> List[str]:
        """Problemas de rutas referenciadas (vacío si todo existe)."""
        return [f"no existe el manifiesto: {p}" for p in [*self.data, *self.eval_data] if not Path(p).exists()]

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _objective_from(raw: Dict[str, Any], encoder: str) -> ObjectiveConfig:
    merged = dict(OBJECTIVE_PRESETS.get(encoder, {}))
    merged.update(raw)
    return ObjectiveConfig.from_dict(merged)


def experiment_from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """Construye la configuración aplicando el preset de cabezas del encoder elegido."""
    raw = dict(raw)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"claves desconocidas en la configuración: {sorted(unknown)}")
    encoder = raw.get("encoder", "tiny")
    objective = raw.pop("objective", {})
    if isinstance(objective, str):
        objective = {"objective": objective}
    try:
        return ExperimentConfig(objective=_objective_from(objective, encoder), **raw)
    except TypeError as exc:
        raise ConfigError(f"configuración inválida: {exc}") from None


def read_json(path: Path) -> Dict[str, Any]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no existe el fichero de configuración: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON inválido ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: se esperaba un objeto JSON")
    return raw


def load_experiment(path: Optional[Path] = None, **overrides: Any) -> ExperimentConfig:
    """Carga un ExperimentConfig; los `overrides` no nulos (flags de CLI) tienen prioridad."""
    raw = read_json(path) if path is not None else {}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if isinstance(overrides.get("objective"), str) and isinstance(raw.get("objective"), dict):
        raw["objective"] = {**raw["objective"], "objective": overrides.pop("objective")}
    raw.update(overrides)
    cfg = experiment_from_dict(raw)
    logger.debug("configuración %s cargada (hash=%s)", path or "<defecto>", cfg.hash())
    return cfg


def load_synth_config(path: Optional[Path] = None, **overrides: Any) -> SynthConfig:
    raw = read_json(path) if path is not None else {}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SynthConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"SynthConfig inválida: {exc}") from None
