"""Sustracción de fondo, ventanas temporales (PAIR / CLIP) y flujo de ventanas etiquetadas."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Protocol, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset

from .data import (
    DatasetManifest,
    SensorProfile,
    SequenceEntry,
    TactileFrame,
    join_labels,
    load_sequence,
    load_sequence_labels,
    selected_indices,
)
from .errors import ConfigError, ManifestError
from .utils import parse_enum

logger = logging.getLogger(__name__)

PAIR_STRIDE = 5
CLIP_OFFSETS: Tuple[int, ...] = (0, 2, 4, 6)
MEDIAN_BACKGROUND_FRAMES = 10


class WindowMode(str, Enum):
    PAIR = "PAIR"
    CLIP = "CLIP"


@dataclass
class TactileWindow:
    """Entrada del modelo: par de 6 canales (h×w×6) o clip de 4 frames (4×h×w×3)."""

    mode: WindowMode
    data: np.ndarray
    anchor_index: int
    fps: float = 60.0
    stride: int = PAIR_STRIDE
    frame_indices: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.mode = parse_enum(WindowMode, self.mode)
        if self.mode is WindowMode.PAIR and (self.data.ndim != 3 or self.data.shape[2] != 6):
            raise ConfigError(f"ventana PAIR debe ser h×w×6, recibido {self.data.shape}")
        if self.mode is WindowMode.CLIP and (self.data.ndim != 4 or self.data.shape[0] != 4 or self.data.shape[3] != 3):
            raise ConfigError(f"ventana CLIP debe ser 4×h×w×3, recibido {self.data.shape}")

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        if self.mode is WindowMode.PAIR:
            return int(self.data.shape[0]), int(self.data.shape[1])
        return int(self.data.shape[1]), int(self.data.shape[2])

    @property
    def span_ms(self) -> float:
        frames = self.stride if self.mode is WindowMode.PAIR else CLIP_OFFSETS[-1]
        return frames / self.fps * 1000.0


# ---------------------------------------------------------------------------
# Fondo

def subtract_background(frame: TactileFrame, profile: SensorProfile) -> TactileFrame:
    """Diferencia con la referencia sin contacto, remapeada a [0,1] con 0 → 0.5."""
    ref = profile.background_reference
    if ref is None:
        raise ConfigError(f"el perfil del sensor {frame.sensor_id} no tiene background_reference")
    if ref.shape != frame.pixels.shape:
        raise ConfigError(f"forma de referencia {ref.shape} != frame {frame.pixels.shape}")
    diff = np.clip(0.5 + 0.5 * (frame.pixels - ref), 0.0, 1.0)
    return replace(frame, pixels=diff.astype(np.float32))


def select_background(frames: Sequence[TactileFrame], no_contact_frame: Optional[int] = None) -> np.ndarray:
    """Frame marcado sin contacto o, si no hay marca, mediana por píxel de los 10 primeros."""
    if not frames:
        raise ConfigError("no hay frames para estimar el fondo")
    if no_contact_frame is not None:
        return frames[no_contact_frame].pixels.copy()
    head = np.stack([f.pixels for f in frames[:MEDIAN_BACKGROUND_FRAMES]])
    return np.median(head, axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# Ventanas

def _check_anchor(seq: Sequence[Any], t: int) -> None:
    if not 0 <= t < len(seq):
        raise ConfigError(f"índice de ancla {t} fuera de rango [0, {len(seq)})")


def _pixels(item: Union[TactileFrame, np.ndarray]) -> np.ndarray:
    return item.pixels if isinstance(item, TactileFrame) else item


def make_pair_window(seq: Sequence[TactileFrame], t: int, stride: int = PAIR_STRIDE, fps: float = 60.0) -> TactileWindow:
    """I_t ⊕ I_{t−stride}; el índice anterior se recorta en 0."""
    _check_anchor(seq, t)
    prev = max(t - stride, 0)
    data = np.concatenate([_pixels(seq[t]), _pixels(seq[prev])], axis=2)
    return TactileWindow(WindowMode.PAIR, data, anchor_index=t, fps=fps, stride=stride, frame_indices=(t, prev))


def clip_indices(t: int) -> Tuple[int, ...]:
    return tuple(max(t - o, 0) for o in CLIP_OFFSETS)


def make_clip_window(seq: Sequence[TactileFrame], t: int, fps: float = 60.0) -> TactileWindow:
    """Clip de 4 frames en [t, t−2, t−4, t−6] recortados en 0."""
    _check_anchor(seq, t)
    idx = clip_indices(t)
    data = np.stack([_pixels(seq[i]) for i in idx], axis=0)
    return TactileWindow(WindowMode.CLIP, data, anchor_index=t, fps=fps, stride=CLIP_OFFSETS[-1], frame_indices=idx)


def resize_frames(frames: np.ndarray, side: int) -> np.ndarray:
    """Reescalado bilineal de un lote n×h×w×c a n×side×side×c."""
    if frames.shape[1] == side and frames.shape[2] == side:
        return frames
    x = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
    return y.clamp_(0.0, 1.0).permute(0, 2, 3, 1).contiguous().numpy()


def resize_for_encoder(window: TactileWindow, side: int = 224) -> TactileWindow:
    if window.mode is WindowMode.PAIR:
        data = resize_frames(window.data[None], side)[0]
    else:
        data = resize_frames(window.data, side)
    return replace(window, data=data)


def window_to_tensor(window: TactileWindow) -> torch.Tensor:
    """PAIR → (6,H,W); CLIP → (4,3,H,W)."""
    data = torch.from_numpy(np.ascontiguousarray(window.data, dtype=np.float32))
    if window.mode is WindowMode.PAIR:
        return data.permute(2, 0, 1).contiguous()
    return data.permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# Fuentes de secuencias y etiquetas

@dataclass
class LoadedSequence:
    entry: SequenceEntry
    profile: SensorProfile
    frames: List[TactileFrame]
    labels: Optional[pd.DataFrame] = None


class SequenceSource(Protocol):
    """Cualquier objeto capaz de producir secuencias cargadas (manifiesto o corpus en memoria)."""

    def iter_sequences(self) -> Iterator[LoadedSequence]:  # pragma: no cover - interfaz
        ...


def _iter_source(source: Union[DatasetManifest, SequenceSource], shard: Optional[Tuple[int, int]]) -> Iterator[Tuple[LoadedSequence, Optional[Sequence[int]]]]:
    index, count = shard or (0, 1)
    if count < 1 or not 0 <= index < count:
        raise ConfigError(f"shard inválido {shard}")
    if isinstance(source, DatasetManifest):
        for pos, entry in enumerate(source.sequences):
            if pos % count != index:
                continue
            seq = LoadedSequence(
                entry=entry,
                profile=source.profile_for(entry),
                frames=load_sequence(source, entry),
                labels=load_sequence_labels(source, entry),
            )
            yield seq, selected_indices(source, entry.sequence_id)
    else:
        for pos, seq in enumerate(source.iter_sequences()):
            if pos % count == index:
                yield seq, None


def _prepare_frames(seq: LoadedSequence, subtract: bool) -> List[TactileFrame]:
    if not subtract:
        return seq.frames
    if seq.entry.no_contact_frame is not None or seq.profile.background_reference is None:
        ref = select_background(seq.frames, seq.entry.no_contact_frame)
        profile = replace(seq.profile, background_reference=ref, native_resolution=ref.shape[:2])
    else:
        profile = seq.profile
    return [subtract_background(f, profile) for f in seq.frames]


def _column(table: pd.DataFrame, name: str) -> Optional[np.ndarray]:
    return table[name].to_numpy() if name in table.columns else None


def window_labels(table: Optional[pd.DataFrame], rows: Optional[np.ndarray], t: int, span: int) -> Dict[str, Any]:
    """Etiquetas de la ventana anclada en t.

    `force` es la fuerza en t, `delta_force` su cambio respecto a t−span y
    `pose` la suma de incrementos por frame en (t−span, t].
    """
    if table is None or rows is None:
        return {}
    r = int(rows[t])
    r0 = int(rows[max(t - span, 0)])
    out: Dict[str, Any] = {"timestamp_us": int(table["timestamp_us"].iloc[r])}
    if {"fx_N", "fy_N", "fz_N"} <= set(table.columns):
        forces = table[["fx_N", "fy_N", "fz_N"]].to_numpy(dtype=np.float64)
        out["force"] = forces[r].copy()
        out["delta_force"] = forces[r] - forces[r0]
    for name in ("slip", "grasp_success", "textile_id"):
        col = _column(table, name)
        if col is not None:
            out[name] = int(col[r])
    if "mu" in table.columns:
        out["mu"] = float(table["mu"].iloc[r])
    if {"dx_mm", "dy_mm", "dtheta_deg"} <= set(table.columns):
        inc = table[["dx_mm", "dy_mm", "dtheta_deg"]].to_numpy(dtype=np.float64)
        lo = max(t - span, 0)
        out["pose"] = inc[rows[lo + 1 : t + 1]].sum(axis=0) if t > lo else np.zeros(3)
    return out


def _label_rows(seq: LoadedSequence) -> Optional[np.ndarray]:
    if seq.labels is None:
        return None
    ts = np.array([f.timestamp_us for f in seq.frames], dtype=np.int64)
    return join_labels(ts, seq.labels["timestamp_us"].to_numpy(), seq.profile.frame_period_us)


def _span(mode: WindowMode, stride: int) -> int:
    return stride if mode is WindowMode.PAIR else CLIP_OFFSETS[-1]


def iterate_windows(
    source: Union[DatasetManifest, SequenceSource],
    mode: WindowMode = WindowMode.PAIR,
    stride: int = PAIR_STRIDE,
    side: Optional[int] = None,
    shard: Optional[Tuple[int, int]] = None,
    subtract: bool = True,
) -> Iterator[Tuple[TactileWindow, Dict[str, Any]]]:
    """Genera perezosamente (ventana, etiquetas) con una ancla por frame.

    `shard=(i, n)` reparte las secuencias entre n workers de solo lectura.
    """
    mode = parse_enum(WindowMode, mode)
    for seq, anchors in _iter_source(source, shard):
        frames = _prepare_frames(seq, subtract)
        rows = _label_rows(seq)
        fps = seq.profile.fps
        for t in anchors if anchors is not None else range(len(frames)):
            if mode is WindowMode.PAIR:
                window = make_pair_window(frames, t, stride=stride, fps=fps)
            else:
                window = make_clip_window(frames, t, fps=fps)
            if side is not None:
                window = resize_for_encoder(window, side)
            yield window, window_labels(seq.labels, rows, t, _span(mode, stride))


class WindowBank(Dataset):
    """Ventanas etiquetadas en memoria construidas bajo demanda a partir de frames ya procesados.

    Guarda cada frame una sola vez (fondo restado y reescalado); es de solo lectura
    y por tanto seguro para DataLoader con varios workers.
    """

    def __init__(
        self,
        sequences: Sequence[LoadedSequence],
        mode: WindowMode = WindowMode.PAIR,
        stride: int = PAIR_STRIDE,
        side: Optional[int] = None,
        anchors: Optional[Dict[str, Sequence[int]]] = None,
        subtract: bool = True,
    ):
        self.mode = parse_enum(WindowMode, mode)
        self.stride = stride
        self.frames: List[np.ndarray] = []
        self.fps: List[float] = []
        self.index: List[Tuple[int, int]] = []
        self.labels: List[Dict[str, Any]] = []
        self.sequence_ids: List[str] = []
        span = _span(self.mode, stride)
        for pos, seq in enumerate(sequences):
            frames = np.stack([f.pixels for f in _prepare_frames(seq, subtract)])
            if side is not None:
                frames = resize_frames(frames, side)
            self.frames.append(frames.astype(np.float32, copy=False))
            self.fps.append(seq.profile.fps)
            self.sequence_ids.append(seq.entry.sequence_id)
            rows = _label_rows(seq)
            chosen = anchors.get(seq.entry.sequence_id) if anchors is not None else None
            for t in chosen if chosen is not None else range(len(frames)):
                self.index.append((pos, int(t)))
                self.labels.append(window_labels(seq.labels, rows, int(t), span))

    @classmethod
    def from_source(
        cls,
        source: Union[DatasetManifest, SequenceSource, Sequence[Union[DatasetManifest, SequenceSource]]],
        mode: WindowMode = WindowMode.PAIR,
        stride: int = PAIR_STRIDE,
        side: Optional[int] = None,
        shard: Optional[Tuple[int, int]] = None,
        subtract: bool = True,
    ) -> "WindowBank":
        """Banco a partir de uno o varios manifiestos/corpus (los ids de secuencia deben ser únicos)."""
        sources = list(source) if isinstance(source, (list, tuple)) else [source]
        sequences: List[LoadedSequence] = []
        anchors: Dict[str, Sequence[int]] = {}
        for src in sources:
            for seq, chosen in _iter_source(src, shard):
                if any(s.entry.sequence_id == seq.entry.sequence_id for s in sequences):
                    raise ManifestError(f"sequence_id duplicado entre fuentes: {seq.entry.sequence_id}")
                sequences.append(seq)
                if chosen is not None:
                    anchors[seq.entry.sequence_id] = chosen
        return cls(sequences, mode=mode, stride=stride, side=side, anchors=anchors or None, subtract=subtract)

    def __len__(self) -> int:
        return len(self.index)

    def window(self, i: int) -> TactileWindow:
        pos, t = self.index[i]
        frames = self.frames[pos]
        if self.mode is WindowMode.PAIR:
            return make_pair_window(frames, t, stride=self.stride, fps=self.fps[pos])
        return make_clip_window(frames, t, fps=self.fps[pos])

    def __getitem__(self, i: int) -> Tuple[torch.Tensor, Dict[str, Any]]:
        return window_to_tensor(self.window(i)), self.labels[i]

    def stack(self, indices: Sequence[int]) -> torch.Tensor:
        return torch.stack([window_to_tensor(self.window(int(i))) for i in indices])

    def targets(self, key: str) -> np.ndarray:
        missing = [i for i, lab in enumerate(self.labels) if key not in lab]
        if missing:
            raise ConfigError(f"faltan etiquetas '{key}' en {len(missing)} ventanas")
        return np.stack([np.asarray(lab[key]) for lab in self.labels])

    def sequence_set(self) -> Set[str]:
        """Identificadores de las secuencias con alguna ventana en este banco."""
        return {self.sequence_ids[pos] for pos, _ in self.index}

    def subset(self, indices: Sequence[int]) -> "WindowBank":
        view = object.__new__(WindowBank)
        view.mode, view.stride = self.mode, self.stride
        view.frames, view.fps, view.sequence_ids = self.frames, self.fps, self.sequence_ids
        view.index = [self.index[int(i)] for i in indices]
        view.labels = [self.labels[int(i)] for i in indices]
        return view

    def with_offset(self, offset: int) -> List[int]:
        """Para cada ventana, el índice de la ventana `offset` frames antes en la misma secuencia."""
        lookup = {key: i for i, key in enumerate(self.index)}
        out = []
        for i, (pos, t) in enumerate(self.index):
            out.append(lookup.get((pos, max(t - offset, 0)), i))
        return out
