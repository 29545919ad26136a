"""Generador sintético de corpus táctiles: golpes presionar-deslizar sobre una sonda estática.

Cada secuencia simula un sensor que se presiona contra una sonda, acumula fuerza
tangencial en régimen de adherencia hasta el borde del cono de fricción y luego
desliza. Las imágenes se sintetizan con una cúpula gaussiana elíptica, sombreado
lambertiano con tres luces, un campo de cizalla y, opcionalmente, una rejilla de
marcadores 8×8. Las etiquetas se derivan de las fuerzas almacenadas, de modo que
re-etiquetar con `label_slip` reproduce exactamente la columna `slip`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from .data import (
    FRAME_PATTERN,
    LABEL_COLUMNS,
    DatasetManifest,
    SensorProfile,
    SensorType,
    SequenceEntry,
    TactileFrame,
    read_frame_png,
    save_manifest,
    write_frame_png,
    write_labels,
)
from .errors import ConfigError
from .labels import grasp_stable_array, label_slip_array
from .utils import parse_enum
from .windows import LoadedSequence

logger = logging.getLogger(__name__)

SEQUENCE_GAP_US = 100_000_000
ELLIPSE_ASPECT = 1.25
DEPTH_PX_PER_N = 3.0
SHEAR_PX_PER_N = 1.5
SHEAR_SKEW_PX = 8.0
SHADE_GAIN = 0.6
LIGHT_ELEVATION_DEG = 45.0
TEXTURE_AMPLITUDE = 0.15
TEXTILE_PERIODS_PX: Tuple[float, ...] = (4.0, 6.0, 8.5, 12.0)
TEXTILE_ANGLES_DEG: Tuple[float, ...] = (0.0, 36.0, 72.0, 108.0, 144.0)
MARKER_GRID = 8
MARKER_DARKNESS = 0.55


class Indenter(str, Enum):
    SPHERE = "sphere"
    FLAT = "flat"
    SHARP = "sharp"


@dataclass
class SynthConfig:
    n_sequences: int = 8
    frames_per_sequence: int = 64
    indenter: Indenter = Indenter.SPHERE
    gel_stiffness: float = 1.0
    friction_mu: float = 0.8
    noise_sigma: float = 0.01
    seed: int = 0
    sensor_type: SensorType = SensorType.DIGIT
    image_size: Tuple[int, int] = (120, 160)
    fps: float = 60.0
    force_noise_n: float = 0.005
    max_normal_n: float = 5.0
    stride: int = 5
    textile_classes: int = 20
    markers: Optional[bool] = None
    mm_per_px: float = 0.12

    def __post_init__(self):
        self.indenter = parse_enum(Indenter, self.indenter)
        self.sensor_type = parse_enum(SensorType, self.sensor_type)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.n_sequences < 1 or self.frames_per_sequence < 1:
            raise ConfigError("n_sequences y frames_per_sequence deben ser positivos")
        if min(self.image_size) < 8:
            raise ConfigError(f"image_size demasiado pequeño: {self.image_size}")
        if self.friction_mu <= 0:
            raise ConfigError("friction_mu debe ser > 0")
        if self.gel_stiffness <= 0:
            raise ConfigError("gel_stiffness debe ser > 0")
        if self.noise_sigma < 0 or self.force_noise_n < 0:
            raise ConfigError("los niveles de ruido deben ser >= 0")
        if self.fps <= 0 or self.max_normal_n <= 0 or self.mm_per_px <= 0:
            raise ConfigError("fps, max_normal_n y mm_per_px deben ser > 0")
        if self.stride < 1:
            raise ConfigError("stride debe ser >= 1")
        if not 1 <= self.textile_classes <= len(TEXTILE_PERIODS_PX) * len(TEXTILE_ANGLES_DEG):
            raise ConfigError("textile_classes debe estar en [1, 20]")

    @property
    def has_markers(self) -> bool:
        if self.markers is not None:
            return bool(self.markers)
        return self.sensor_type is SensorType.GELSIGHT_2017

    @property
    def sensor_id(self) -> str:
        return f"{self.sensor_type.value.lower()}_synth"

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"claves desconocidas en SynthConfig: {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------------------
# Aspecto de cada sensor

@dataclass(frozen=True)
class SensorStyle:
    base_rgb: Tuple[float, float, float]
    light_azimuth_deg: float
    vignette: float


SENSOR_STYLES: Dict[SensorType, SensorStyle] = {
    SensorType.DIGIT: SensorStyle((0.42, 0.47, 0.55), 90.0, 0.18),
    SensorType.GELSIGHT_2017: SensorStyle((0.50, 0.50, 0.48), 60.0, 0.08),
    SensorType.GELSIGHT_MINI: SensorStyle((0.55, 0.48, 0.40), 30.0, 0.12),
}


def textile_pattern(textile_id: int) -> Tuple[float, float]:
    """(periodo en px, orientación en grados) de la rejilla de la clase textil."""
    period = TEXTILE_PERIODS_PX[(textile_id // len(TEXTILE_ANGLES_DEG)) % len(TEXTILE_PERIODS_PX)]
    angle = TEXTILE_ANGLES_DEG[textile_id % len(TEXTILE_ANGLES_DEG)]
    return period, angle


# ---------------------------------------------------------------------------
# Render

@dataclass
class ContactState:
    center_px: Tuple[float, float]
    theta_deg: float
    depth_px: float
    radius_px: float
    shear_px: Tuple[float, float]
    texture_period_px: float
    texture_angle_deg: float


class GelRenderer:
    """Sintetiza imágenes de gel para un tamaño, sensor e indentador fijos."""

    def __init__(self, config: SynthConfig):
        self.config = config
        self.style = SENSOR_STYLES[config.sensor_type]
        h, w = config.image_size
        self.yy, self.xx = np.mgrid[0:h, 0:w].astype(np.float64)
        elev = math.radians(LIGHT_ELEVATION_DEG)
        self.lights = np.array(
            [
                [
                    math.cos(elev) * math.cos(math.radians(self.style.light_azimuth_deg + 120.0 * c)),
                    math.cos(elev) * math.sin(math.radians(self.style.light_azimuth_deg + 120.0 * c)),
                    math.sin(elev),
                ]
                for c in range(3)
            ]
        )
        r2 = ((self.xx - w / 2) / (w / 2)) ** 2 + ((self.yy - h / 2) / (h / 2)) ** 2
        self.shade_base = (1.0 - self.style.vignette * r2 / 2.0)[..., None] * np.asarray(self.style.base_rgb)
        mx = np.linspace(w / (2 * MARKER_GRID), w - w / (2 * MARKER_GRID), MARKER_GRID)
        my = np.linspace(h / (2 * MARKER_GRID), h - h / (2 * MARKER_GRID), MARKER_GRID)
        gx, gy = np.meshgrid(mx, my)
        self.marker_rest = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.marker_sigma = max(0.012 * min(h, w), 0.8)

    @property
    def base_radius_px(self) -> float:
        return 0.18 * min(self.config.image_size)

    def _profile(self, rho2: np.ndarray) -> np.ndarray:
        kind = self.config.indenter
        if kind is Indenter.FLAT:
            return np.exp(-0.5 * rho2**2)
        if kind is Indenter.SHARP:
            return np.exp(-1.6 * (np.sqrt(rho2 + 0.05) - math.sqrt(0.05)))
        return np.exp(-0.5 * rho2)

    def _shear(self, contact: ContactState, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cx, cy = contact.center_px
        reach = 1.5 * max(contact.radius_px, 1.0)
        w = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * reach**2))
        return contact.shear_px[0] * w, contact.shear_px[1] * w

    def height(self, contact: ContactState) -> np.ndarray:
        """Profundidad de indentación (px) en cada píxel; 0 sin contacto."""
        if contact.depth_px <= 0.0:
            return np.zeros_like(self.xx)
        cx, cy = contact.center_px
        ux, uy = self._shear(contact, self.xx, self.yy)
        xs = self.xx - ux - cx
        ys = self.yy - uy - cy
        t = math.radians(contact.theta_deg)
        q0 = math.cos(t) * xs + math.sin(t) * ys
        q1 = -math.sin(t) * xs + math.cos(t) * ys
        r = max(contact.radius_px, 1.0)
        rho2 = (q0 / (r * ELLIPSE_ASPECT)) ** 2 + (q1 * ELLIPSE_ASPECT / r) ** 2
        prof = self._profile(rho2)
        sx, sy = contact.shear_px
        skew = np.clip((xs * sx + ys * sy) / (r * SHEAR_SKEW_PX), -0.5, 0.5)
        a = math.radians(contact.texture_angle_deg)
        phase = (math.cos(a) * xs + math.sin(a) * ys) / contact.texture_period_px
        texture = TEXTURE_AMPLITUDE * np.cos(2.0 * math.pi * phase)
        return contact.depth_px * prof * (1.0 + skew + texture)

    def _markers(self, contact: Optional[ContactState]) -> np.ndarray:
        pos = self.marker_rest
        if contact is not None and contact.depth_px > 0.0:
            ux, uy = self._shear(contact, pos[:, 0], pos[:, 1])
            pos = pos + np.stack([ux, uy], axis=1)
        dots = np.zeros_like(self.xx)
        for mx, my in pos:
            dots += np.exp(-((self.xx - mx) ** 2 + (self.yy - my) ** 2) / (2.0 * self.marker_sigma**2))
        return 1.0 - MARKER_DARKNESS * np.minimum(dots, 1.0)

    def render(self, contact: Optional[ContactState], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        h = self.height(contact) if contact is not None else np.zeros_like(self.xx)
        gy, gx = np.gradient(h)
        norm = np.sqrt(gx**2 + gy**2 + 1.0)
        normals = np.stack([gx / norm, gy / norm, 1.0 / norm], axis=-1)
        shading = normals @ self.lights.T - self.lights[:, 2]
        img = self.shade_base + SHADE_GAIN * shading
        if self.config.has_markers:
            img = img * self._markers(contact)[..., None]
        if rng is not None and self.config.noise_sigma > 0:
            img = img + rng.normal(0.0, self.config.noise_sigma, img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    def background(self) -> np.ndarray:
        return self.render(None)


# ---------------------------------------------------------------------------
# Dinámica del golpe

@dataclass
class ProbeStroke:
    """Golpe presionar-adherir-deslizar de un sensor sobre una sonda estática."""

    fn_target: float
    mu: float
    press_frames: int
    direction_rad: float
    tangential_stiffness: float  # N por mm de desplazamiento ordenado
    slide_speed_mm: float  # mm/frame
    spin_deg: float  # deg/frame durante el deslizamiento
    center_px: Tuple[float, float]
    theta_deg: float
    textile_id: int = 0
    normal_drop: float = 0.1
    frame: int = 0
    fn: float = 0.0
    ft: float = 0.0
    commanded_mm: float = 0.0
    slipping: bool = False
    onset: bool = False
    pose_increment: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    _theta0: float = field(default=0.0, init=False, repr=False)

    def __post_init__(self):
        self._theta0 = self.theta_deg

    @classmethod
    def sample(cls, rng: np.random.Generator, config: SynthConfig, textile_id: int = 0) -> "ProbeStroke":
        n = config.frames_per_sequence
        h, w = config.image_size
        fn_target = float(rng.uniform(0.1, 1.0) * config.max_normal_n)
        press = max(1, int(round(rng.uniform(0.15, 0.3) * n)))
        stick = max(2, int(round(rng.uniform(0.15, 0.35) * n)))
        n_slip = max(n - 1 - press - stick, 1)
        direction = float(rng.uniform(0.0, 2.0 * math.pi))
        speed = float(math.exp(rng.uniform(math.log(0.02), math.log(0.6))))
        speed = min(speed, 0.5 * min(h, w) * config.mm_per_px / n_slip)
        travel_px = speed / config.mm_per_px * n_slip
        jitter = rng.uniform(-0.1, 0.1, size=2) * min(h, w)
        center = (
            w / 2 - 0.5 * travel_px * math.cos(direction) + float(jitter[0]),
            h / 2 - 0.5 * travel_px * math.sin(direction) + float(jitter[1]),
        )
        spin = float(math.exp(rng.uniform(math.log(0.02), math.log(0.4)))) * float(rng.choice([-1.0, 1.0]))
        stiffness = config.friction_mu * fn_target / (speed * stick)
        return cls(
            fn_target=fn_target,
            mu=config.friction_mu,
            press_frames=press,
            direction_rad=direction,
            tangential_stiffness=stiffness,
            slide_speed_mm=speed,
            spin_deg=spin,
            center_px=center,
            theta_deg=float(rng.uniform(0.0, 180.0)),
            textile_id=textile_id,
        )

    @property
    def commanded_motion(self) -> bool:
        return self.frame > self.press_frames

    def step(self, mm_per_px: float) -> None:
        """Avanza un frame la dinámica del golpe."""
        self.frame += 1
        self.onset = False
        self.pose_increment = (0.0, 0.0, 0.0)
        if self.frame <= self.press_frames:
            self.fn = self.fn_target * self.frame / self.press_frames
            return
        self.commanded_mm += self.slide_speed_mm
        limit = self.mu * self.fn_target
        if not self.slipping:
            demand = self.tangential_stiffness * self.commanded_mm
            if demand < limit:
                self.ft = demand
                return
            # pico de fricción estática: borde del cono, aún sin desplazamiento
            self.ft = limit
            self.slipping = True
            self.onset = True
            return
        self.fn = self.fn_target * (1.0 - self.normal_drop)
        self.ft = limit
        dx_px = self.slide_speed_mm / mm_per_px * math.cos(self.direction_rad)
        dy_px = self.slide_speed_mm / mm_per_px * math.sin(self.direction_rad)
        self.center_px = (self.center_px[0] + dx_px, self.center_px[1] + dy_px)
        self.theta_deg += self.spin_deg
        self.pose_increment = (dx_px * mm_per_px, dy_px * mm_per_px, self.spin_deg)

    def snapshot(self) -> Dict[str, float]:
        """Fuerzas y pose del frame actual, sin ruido de medida."""
        return {
            "fx_N": self.ft * math.cos(self.direction_rad),
            "fy_N": self.ft * math.sin(self.direction_rad),
            "fz_N": self.fn,
            "slip_onset": int(self.onset),
            "dx_mm": self.pose_increment[0],
            "dy_mm": self.pose_increment[1],
            "dtheta_deg": self.pose_increment[2],
        }

    def contact(self, renderer: GelRenderer, config: SynthConfig) -> Optional[ContactState]:
        if self.fn <= 0.0:
            return None
        load = self.fn / config.max_normal_n
        base = renderer.base_radius_px
        if config.indenter is Indenter.SPHERE:
            radius = base * (0.5 + 0.5 * math.sqrt(load))
        elif config.indenter is Indenter.SHARP:
            radius = 0.45 * base
        else:
            radius = base
        shear = SHEAR_PX_PER_N * self.ft / config.gel_stiffness
        period, angle = textile_pattern(self.textile_id)
        return ContactState(
            center_px=self.center_px,
            theta_deg=self.theta_deg,
            depth_px=DEPTH_PX_PER_N * self.fn / config.gel_stiffness,
            radius_px=radius,
            shear_px=(shear * math.cos(self.direction_rad), shear * math.sin(self.direction_rad)),
            texture_period_px=period,
            texture_angle_deg=angle + (self.theta_deg - self._theta0),
        )


# ---------------------------------------------------------------------------
# Corpus

@dataclass
class SynthCorpus:
    """Corpus sintético en memoria; implementa `iter_sequences()` como fuente de ventanas."""

    config: SynthConfig
    profile: SensorProfile
    sequences: List[LoadedSequence]
    commanded_motion: Dict[str, np.ndarray] = field(default_factory=dict)

    def iter_sequences(self) -> Iterator[LoadedSequence]:
        return iter(self.sequences)

    @property
    def sensor_id(self) -> str:
        return self.config.sensor_id

    @property
    def labels(self) -> Dict[str, pd.DataFrame]:
        return {s.entry.sequence_id: s.labels for s in self.sequences}

    @property
    def n_frames(self) -> int:
        return sum(len(s.frames) for s in self.sequences)


def _sequence_id(index: int) -> str:
    return f"seq_{index:04d}"


def _render_sequence(
    config: SynthConfig,
    renderer: GelRenderer,
    index: int,
    rng: np.random.Generator,
) -> Tuple[List[TactileFrame], pd.DataFrame, np.ndarray]:
    sid = _sequence_id(index)
    start_us = index * SEQUENCE_GAP_US
    period = 1e6 / config.fps
    stroke = ProbeStroke.sample(rng, config, textile_id=index % config.textile_classes)
    frames: List[TactileFrame] = []
    rows: List[Dict[str, float]] = []
    motion = np.zeros(config.frames_per_sequence, dtype=bool)
    for i in range(config.frames_per_sequence):
        if i:
            stroke.step(config.mm_per_px)
        row = stroke.snapshot()
        if stroke.fn > 0.0 and config.force_noise_n > 0:
            noise = rng.normal(0.0, config.force_noise_n, size=3)
            row["fx_N"] += float(noise[0])
            row["fy_N"] += float(noise[1])
            row["fz_N"] += float(noise[2])
        ts = int(start_us + round(i * period))
        row["timestamp_us"] = ts
        rows.append(row)
        motion[i] = stroke.commanded_motion
        pixels = renderer.render(stroke.contact(renderer, config), rng)
        frames.append(TactileFrame(pixels=pixels, timestamp_us=ts, sensor_id=config.sensor_id, sequence_id=sid, frame_index=i))
    table = pd.DataFrame(rows)
    forces = table[["fx_N", "fy_N", "fz_N"]].to_numpy(dtype=np.float64)
    table["slip"] = label_slip_array(forces, config.friction_mu)
    table["mu"] = config.friction_mu
    table["grasp_success"] = grasp_stable_array(forces, config.friction_mu)
    table["textile_id"] = stroke.textile_id
    return frames, table[LABEL_COLUMNS], motion


def render_corpus(config: SynthConfig) -> SynthCorpus:
    """Genera el corpus completo en memoria; bit a bit determinista dado `config.seed`."""
    renderer = GelRenderer(config)
    background = renderer.background()
    profile = SensorProfile(
        sensor_type=config.sensor_type,
        native_resolution=config.image_size,
        fps=config.fps,
        background_reference=background,
        has_markers=config.has_markers,
    )
    children = np.random.SeedSequence(config.seed).spawn(config.n_sequences)
    sequences: List[LoadedSequence] = []
    motion: Dict[str, np.ndarray] = {}
    for index, child in enumerate(children):
        frames, table, moving = _render_sequence(config, renderer, index, np.random.default_rng(child))
        sid = _sequence_id(index)
        entry = SequenceEntry(
            sequence_id=sid,
            sensor_id=config.sensor_id,
            frame_glob=f"{sid}/frame_*.png",
            label_files=[f"{sid}/labels.csv"],
            n_frames=len(frames),
            start_us=index * SEQUENCE_GAP_US,
            no_contact_frame=0,
        )
        sequences.append(LoadedSequence(entry=entry, profile=profile, frames=frames, labels=table))
        motion[sid] = moving
    logger.info(
        "corpus sintético %s: %d secuencias × %d frames (seed=%d)",
        config.sensor_id,
        config.n_sequences,
        config.frames_per_sequence,
        config.seed,
    )
    return SynthCorpus(config=config, profile=profile, sequences=sequences, commanded_motion=motion)


def synth_generate(config: SynthConfig, out_dir: Path) -> Tuple[DatasetManifest, Dict[str, pd.DataFrame]]:
    """Escribe el corpus en disco (PNG + CSV + manifest.json) y devuelve manifiesto y etiquetas."""
    out_dir = Path(out_dir)
    corpus = render_corpus(config)
    bg_rel = f"background_{config.sensor_id}.png"
    write_frame_png(out_dir / bg_rel, corpus.profile.background_reference)
    for seq in corpus.sequences:
        sid = seq.entry.sequence_id
        for frame in seq.frames:
            write_frame_png(out_dir / sid / (FRAME_PATTERN % frame.frame_index), frame.pixels)
        write_labels(seq.labels, out_dir / seq.entry.label_files[0])
    profile = SensorProfile(
        sensor_type=config.sensor_type,
        native_resolution=config.image_size,
        fps=config.fps,
        background_reference=read_frame_png(out_dir / bg_rel),
        has_markers=config.has_markers,
        background_path=bg_rel,
    )
    manifest = DatasetManifest(
        root_path=out_dir,
        sequences=[s.entry for s in corpus.sequences],
        sensor_profiles={config.sensor_id: profile},
    )
    save_manifest(manifest)
    logger.info("manifiesto escrito en %s", out_dir / "manifest.json")
    return manifest, corpus.labels
