"""Tipos de datos táctiles, manifiestos de dataset y etiquetas por secuencia.

Los frames viven en memoria como `float32` en [0,1] y en disco como PNG RGB de
8 bits (`frame_%06d.png`). Las etiquetas son un CSV por secuencia cuyas columnas
son opcionales según la tarea (ver `LABEL_COLUMNS`).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from .errors import ConfigError, ManifestError
from .utils import parse_enum, rng_for

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
FRAME_PATTERN = "frame_%06d.png"

LABEL_COLUMNS: List[str] = [
    "timestamp_us",
    "fx_N",
    "fy_N",
    "fz_N",
    "slip",
    "mu",
    "slip_onset",
    "dx_mm",
    "dy_mm",
    "dtheta_deg",
    "grasp_success",
    "textile_id",
]


class SensorType(str, Enum):
    DIGIT = "DIGIT"
    GELSIGHT_2017 = "GelSight2017"
    GELSIGHT_MINI = "GelSightMini"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class TactileFrame:
    """Imagen táctil h×w×3 en [0,1] con su identificación temporal."""

    pixels: np.ndarray
    timestamp_us: int
    sensor_id: str
    sequence_id: str
    frame_index: int

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] <= 0 or pixels.shape[1] <= 0:
            raise ConfigError(f"frame con forma inválida {pixels.shape}; se espera h×w×3")
        if self.frame_index < 0:
            raise ConfigError("frame_index debe ser no negativo")
        self.pixels = np.clip(pixels, 0.0, 1.0)

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])


@dataclass
class SensorProfile:
    sensor_type: SensorType = SensorType.DIGIT
    native_resolution: Tuple[int, int] = (240, 320)
    fps: float = 60.0
    background_reference: Optional[np.ndarray] = field(default=None, repr=False)
    has_markers: bool = False
    background_path: Optional[str] = None

    def __post_init__(self):
        self.sensor_type = parse_enum(SensorType, self.sensor_type)
        self.native_resolution = (int(self.native_resolution[0]), int(self.native_resolution[1]))
        if self.fps <= 0:
            raise ConfigError("fps debe ser > 0")
        if self.background_reference is not None:
            ref = np.asarray(self.background_reference, dtype=np.float32)
            if ref.shape[:2] != self.native_resolution:
                raise ConfigError(
                    f"background_reference {ref.shape[:2]} no coincide con native_resolution {self.native_resolution}"
                )
            self.background_reference = ref

    @property
    def frame_period_us(self) -> float:
        return 1e6 / self.fps


@dataclass
class SequenceEntry:
    sequence_id: str
    sensor_id: str
    frame_glob: str
    label_files: List[str] = field(default_factory=list)
    n_frames: int = 0
    start_us: int = 0
    no_contact_frame: Optional[int] = None


@dataclass
class DatasetManifest:
    root_path: Path
    sequences: List[SequenceEntry] = field(default_factory=list)
    sensor_profiles: Dict[str, SensorProfile] = field(default_factory=dict)
    split: Split = Split.TRAIN
    selection: Optional[List[Tuple[str, int]]] = None
    budget: float = 1.0

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        self.split = Split(self.split)

    def entry(self, sequence_id: str) -> SequenceEntry:
        for seq in self.sequences:
            if seq.sequence_id == sequence_id:
                return seq
        raise ManifestError(f"secuencia desconocida: {sequence_id}")

    def profile_for(self, entry: SequenceEntry) -> SensorProfile:
        try:
            return self.sensor_profiles[entry.sensor_id]
        except KeyError:
            raise ManifestError(f"sensor_id sin perfil: {entry.sensor_id}") from None

    def examples(self) -> List[Tuple[str, int]]:
        """Identificadores (sequence_id, frame_index) de los ejemplos etiquetados."""
        if self.selection is not None:
            return list(self.selection)
        return [(seq.sequence_id, i) for seq in self.sequences for i in range(seq.n_frames)]


# ---------------------------------------------------------------------------
# Frames

def read_frame_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def write_frame_png(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def frame_paths(manifest: DatasetManifest, entry: SequenceEntry) -> List[Path]:
    return sorted(manifest.root_path.glob(entry.frame_glob))


def load_sequence(manifest: DatasetManifest, entry: SequenceEntry) -> List[TactileFrame]:
    profile = manifest.profile_for(entry)
    paths = frame_paths(manifest, entry)[: entry.n_frames]
    if len(paths) < entry.n_frames:
        raise ManifestError(f"{entry.sequence_id}: {len(paths)} frames en disco, se esperaban {entry.n_frames}")
    period = profile.frame_period_us
    return [
        TactileFrame(
            pixels=read_frame_png(p),
            timestamp_us=int(entry.start_us + round(i * period)),
            sensor_id=entry.sensor_id,
            sequence_id=entry.sequence_id,
            frame_index=i,
        )
        for i, p in enumerate(paths)
    ]


# ---------------------------------------------------------------------------
# Etiquetas

def write_labels(table: pd.DataFrame, path: Path) -> None:
    if "timestamp_us" not in table.columns:
        raise ConfigError("la tabla de etiquetas necesita timestamp_us")
    cols = [c for c in LABEL_COLUMNS if c in table.columns]
    path.parent.mkdir(parents=True, exist_ok=True)
    table[cols].to_csv(path, index=False)


def load_labels(path: Path) -> pd.DataFrame:
    try:
        table = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise ManifestError(f"no se pudo leer {path}: {exc}") from exc
    if "timestamp_us" not in table.columns:
        raise ManifestError(f"{path}: falta la columna timestamp_us")
    return table


def load_sequence_labels(manifest: DatasetManifest, entry: SequenceEntry) -> Optional[pd.DataFrame]:
    """Concatena las columnas de todos los CSV de la secuencia (unidos por timestamp)."""
    table: Optional[pd.DataFrame] = None
    for rel in entry.label_files:
        part = load_labels(manifest.root_path / rel)
        table = part if table is None else table.merge(part, on="timestamp_us", how="outer", suffixes=("", "_dup"))
    if table is not None:
        table = table.sort_values("timestamp_us", kind="stable").reset_index(drop=True)
    return table


def join_labels(frame_ts: np.ndarray, label_ts: np.ndarray, period_us: float) -> np.ndarray:
    """Índice de la fila de etiqueta con timestamp más cercano a cada frame.

    Error si alguna distancia supera un periodo de frame.
    """
    frame_ts = np.asarray(frame_ts, dtype=np.int64)
    label_ts = np.asarray(label_ts, dtype=np.int64)
    if label_ts.size == 0:
        raise ManifestError("tabla de etiquetas vacía")
    pos = np.searchsorted(label_ts, frame_ts)
    left = np.clip(pos - 1, 0, label_ts.size - 1)
    right = np.clip(pos, 0, label_ts.size - 1)
    use_right = np.abs(label_ts[right] - frame_ts) < np.abs(frame_ts - label_ts[left])
    idx = np.where(use_right, right, left)
    gap = np.abs(label_ts[idx] - frame_ts)
    if np.any(gap > period_us):
        worst = int(np.argmax(gap))
        raise ManifestError(f"timestamp desalineado en frame {worst}: {int(gap[worst])} us > {period_us:.0f} us")
    return idx


# ---------------------------------------------------------------------------
# Manifiesto

def _profile_to_json(profile: SensorProfile) -> dict:
    return {
        "sensor_type": profile.sensor_type.value,
        "native_resolution": list(profile.native_resolution),
        "fps": profile.fps,
        "has_markers": profile.has_markers,
        "background_reference": profile.background_path,
    }


def manifest_to_json(manifest: DatasetManifest) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "split": manifest.split.value,
        "budget": manifest.budget,
        "sensor_profiles": {k: _profile_to_json(v) for k, v in manifest.sensor_profiles.items()},
        "sequences": [
            {
                "sequence_id": s.sequence_id,
                "sensor_id": s.sensor_id,
                "frame_glob": s.frame_glob,
                "label_files": list(s.label_files),
                "n_frames": s.n_frames,
                "start_us": s.start_us,
                "no_contact_frame": s.no_contact_frame,
            }
            for s in manifest.sequences
        ],
        "selection": None if manifest.selection is None else [[s, int(i)] for s, i in manifest.selection],
    }


def save_manifest(manifest: DatasetManifest, path: Optional[Path] = None) -> Path:
    path = Path(path) if path is not None else manifest.root_path / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_json(manifest), indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def load_manifest(path: Path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifiesto ilegible {path}: {exc}") from exc
    root = path.parent
    try:
        profiles: Dict[str, SensorProfile] = {}
        for sensor_id, p in raw.get("sensor_profiles", {}).items():
            bg_rel = p.get("background_reference")
            bg = read_frame_png(root / bg_rel) if bg_rel else None
            profiles[sensor_id] = SensorProfile(
                sensor_type=SensorType(p["sensor_type"]),
                native_resolution=tuple(p["native_resolution"]),
                fps=float(p["fps"]),
                background_reference=bg,
                has_markers=bool(p.get("has_markers", False)),
                background_path=bg_rel,
            )
        sequences = [
            SequenceEntry(
                sequence_id=str(s["sequence_id"]),
                sensor_id=str(s["sensor_id"]),
                frame_glob=str(s["frame_glob"]),
                label_files=[str(x) for x in s.get("label_files", [])],
                n_frames=int(s.get("n_frames", 0)),
                start_us=int(s.get("start_us", 0)),
                no_contact_frame=s.get("no_contact_frame"),
            )
            for s in raw.get("sequences", [])
        ]
        selection = raw.get("selection")
        manifest = DatasetManifest(
            root_path=root,
            sequences=sequences,
            sensor_profiles=profiles,
            split=Split(raw.get("split", "train")),
            selection=None if selection is None else [(str(s), int(i)) for s, i in selection],
            budget=float(raw.get("budget", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifiesto inválido {path}: {exc}") from exc
    if validate:
        problems = validate_manifest(manifest)
        if problems:
            raise ManifestError("; ".join(problems))
    return manifest


def validate_manifest(manifest: DatasetManifest) -> List[str]:
    """Lista de problemas encontrados (vacía si el manifiesto es coherente)."""
    problems: List[str] = []
    seen = set()
    for seq in manifest.sequences:
        if seq.sequence_id in seen:
            problems.append(f"{seq.sequence_id}: sequence_id duplicado")
        seen.add(seq.sequence_id)
        if seq.sensor_id not in manifest.sensor_profiles:
            problems.append(f"{seq.sequence_id}: sensor_id '{seq.sensor_id}' sin perfil")
        if seq.n_frames < 1:
            problems.append(f"{seq.sequence_id}: la secuencia no tiene frames")
        else:
            found = len(frame_paths(manifest, seq))
            if found < seq.n_frames:
                problems.append(f"{seq.sequence_id}: {found} frames en disco, se esperaban {seq.n_frames}")
        for rel in seq.label_files:
            if not (manifest.root_path / rel).is_file():
                problems.append(f"{seq.sequence_id}: falta el fichero de etiquetas {rel}")
        if seq.no_contact_frame is not None and not 0 <= seq.no_contact_frame < max(seq.n_frames, 1):
            problems.append(f"{seq.sequence_id}: no_contact_frame fuera de rango")
    if manifest.selection is not None:
        ids = {s.sequence_id: s.n_frames for s in manifest.sequences}
        for sid, idx in manifest.selection:
            if sid not in ids or not 0 <= idx < ids[sid]:
                problems.append(f"selección colgante ({sid}, {idx})")
                break
    return problems


# ---------------------------------------------------------------------------
# Presupuestos de datos etiquetados

def _strata(manifest: DatasetManifest, examples: List[Tuple[str, int]], stratify_by: Optional[str]) -> List[str]:
    if stratify_by is None:
        sensor = {s.sequence_id: s.sensor_id for s in manifest.sequences}
        return [sensor[sid] for sid, _ in examples]
    values: Dict[str, np.ndarray] = {}
    for seq in manifest.sequences:
        table = load_sequence_labels(manifest, seq)
        if table is None or stratify_by not in table.columns:
            raise ConfigError(f"{seq.sequence_id}: no hay columna '{stratify_by}' para estratificar")
        profile = manifest.profile_for(seq)
        ts = seq.start_us + np.round(np.arange(seq.n_frames) * profile.frame_period_us).astype(np.int64)
        rows = join_labels(ts, table["timestamp_us"].to_numpy(), profile.frame_period_us)
        values[seq.sequence_id] = table[stratify_by].to_numpy()[rows]
    return [str(values[sid][idx]) for sid, idx in examples]


def split_by_budget(
    manifest: DatasetManifest,
    fraction: float,
    seed: int,
    stratify_by: Optional[str] = None,
) -> DatasetManifest:
    """Submuestra determinista y estratificada de los ejemplos etiquetados.

    Cada estrato usa una única permutación sembrada y se queda con su prefijo,
    así los presupuestos pequeños son subconjuntos de los grandes.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction debe estar en (0,1], recibido {fraction}")
    examples = manifest.examples()
    if fraction == 1.0:
        return replace(manifest, selection=examples, budget=1.0)
    keys = _strata(manifest, examples, stratify_by)
    groups: Dict[str, List[int]] = {}
    for pos, key in enumerate(keys):
        groups.setdefault(key, []).append(pos)
    kept: List[int] = []
    for rank, key in enumerate(sorted(groups)):
        members = groups[key]
        perm = rng_for(seed, rank).permutation(len(members))
        n_keep = int(math.floor(fraction * len(members) + 0.5))
        kept.extend(members[i] for i in perm[:n_keep])
    if not kept:
        raise ConfigError(f"el presupuesto {fraction} deja el conjunto vacío")
    kept.sort()
    logger.debug("budget %.4f: %d/%d ejemplos", fraction, len(kept), len(examples))
    return replace(manifest, selection=[examples[i] for i in kept], budget=fraction)


def selected_indices(manifest: DatasetManifest, sequence_id: str) -> Optional[Sequence[int]]:
    """Anclas seleccionadas de una secuencia, o None si no hay selección."""
    if manifest.selection is None:
        return None
    return [i for sid, i in manifest.selection if sid == sequence_id]
