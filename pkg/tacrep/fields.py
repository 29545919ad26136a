"""Campos de fuerza densos no supervisados: cizalla por warping fotométrico y normal por reproyección.

Las cabezas son decoders DPT sobre los niveles intermedios de un encoder
congelado. Convención de canales de una ventana PAIR: 0:3 es I_t y 3:6 es
I_{t−n}. El flujo es un warping hacia atrás: Î_{t−n}(p) = I_t(p + flujo(p)).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from rich.progress import track

from .encoder import ViTEncoder, feature_taps
from .errors import ConfigError, NumericalAbort
from .heads import DPTConfig, DPTDecoder, dpt_decode
from .utils import rng_for

logger = logging.getLogger(__name__)

STREAM_FIELD = 21
RAW_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class SensorIntrinsics:
    """Modelo pinhole de la cámara del gel, en píxeles."""

    fx: float = 200.0
    fy: float = 200.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("fx y fy deben ser > 0")

    @classmethod
    def centered(cls, height: int, width: int, focal: float = 200.0) -> "SensorIntrinsics":
        return cls(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def matrix(self, like: Optional[torch.Tensor] = None) -> torch.Tensor:
        k = torch.tensor([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=torch.float64)
        return k if like is None else k.to(device=like.device, dtype=like.dtype)


@dataclass
class FieldPair:
    normal_field: np.ndarray  # h×w
    shear_field: np.ndarray  # h×w×2

    def __post_init__(self):
        self.normal_field = np.asarray(self.normal_field, dtype=np.float32)
        self.shear_field = np.asarray(self.shear_field, dtype=np.float32)
        h, w = self.normal_field.shape
        if self.shear_field.shape != (h, w, 2):
            raise ConfigError(f"shear_field debe ser {h}×{w}×2, recibido {self.shear_field.shape}")
        if not (np.isfinite(self.normal_field).all() and np.isfinite(self.shear_field).all()):
            raise ConfigError("campos no finitos")
        if np.linalg.norm(self.shear_field, axis=-1).max(initial=0.0) > math.hypot(h, w):
            raise ConfigError("magnitud de cizalla mayor que la diagonal de la imagen")


@dataclass
class FieldConfig:
    alpha: float = 1.0
    beta: float = 0.85
    gamma: float = 0.1
    epsilon: float = 1e-3
    ssim_window: int = 11
    min_depth: float = 0.1
    focal: float = 200.0
    features: int = 64
    lr: float = 1e-4
    steps: int = 200
    batch_size: int = 8
    pose_scale: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta y gamma deben ser >= 0")
        if self.epsilon <= 0 or self.min_depth <= 0:
            raise ConfigError("epsilon y min_depth deben ser > 0")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError("ssim_window debe ser impar")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "FieldConfig":
        unknown = set(raw) - {f.name for f in dc_fields(cls)}
        if unknown:
            raise ConfigError(f"claves desconocidas en FieldConfig: {sorted(unknown)}")
        return cls(**raw)


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def split_pair(batch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(B,6,H,W) → (I_t, I_{t−n})."""
    if batch.dim() != 4 or batch.shape[1] != 6:
        raise ConfigError(f"se esperaba un lote PAIR (B,6,H,W), recibido {tuple(batch.shape)}")
    return batch[:, :3], batch[:, 3:]


# ---------------------------------------------------------------------------
# Pérdidas fotométricas

def _pixel_grid(b: int, h: int, w: int, like: torch.Tensor) -> torch.Tensor:
    ys, xs = torch.meshgrid(
        torch.arange(h, device=like.device, dtype=like.dtype),
        torch.arange(w, device=like.device, dtype=like.dtype),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1).expand(b, h, w, 2)


def sample_at(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Muestreo bilineal de `image` (B,C,H,W) en coordenadas de píxel (B,H,W,2) con borde replicado."""
    h, w = image.shape[-2:]
    gx = 2.0 * coords[..., 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * coords[..., 1] / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).to(image.dtype)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=True)


def warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warping bilineal hacia atrás; `flow` es (B,2,H,W) con (u,v) en píxeles."""
    squeeze = image.dim()
    img = _as_4d(image)
    flow = _as_4d(flow) if flow.dim() == 3 else flow
    if flow.shape[-2:] != img.shape[-2:] or flow.shape[1] != 2:
        raise ConfigError(f"flujo {tuple(flow.shape)} incompatible con la imagen {tuple(img.shape)}")
    b, _, h, w = img.shape
    coords = _pixel_grid(b, h, w, img) + flow.permute(0, 2, 3, 1).to(img.dtype)
    out = sample_at(img, coords)
    return out.reshape(image.shape) if squeeze < 4 else out


def charbonnier(residual: torch.Tensor, epsilon: float = 1e-3) -> torch.Tensor:
    if epsilon <= 0:
        raise ConfigError("epsilon debe ser > 0")
    return torch.sqrt(residual**2 + epsilon**2).mean()


def _gaussian_window(size: int, sigma: float, like: torch.Tensor) -> torch.Tensor:
    coords = torch.arange(size, dtype=like.dtype, device=like.device) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, c1: float = 0.01**2, c2: float = 0.03**2, sigma: float = 1.5) -> torch.Tensor:
    """SSIM medio con ventana gaussiana y relleno por reflexión."""
    if a.shape != b.shape:
        raise ConfigError(f"ssim con formas distintas: {tuple(a.shape)} vs {tuple(b.shape)}")
    x, y = _as_4d(a), _as_4d(b)
    c = x.shape[1]
    kernel = _gaussian_window(window, sigma, x).expand(c, 1, window, window)
    pad = window // 2
    mode = "reflect" if min(x.shape[-2:]) > pad else "replicate"

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(F.pad(t, (pad, pad, pad, pad), mode=mode), kernel, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x * mu_x
    sigma_y = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return (num / den).clamp(-1.0, 1.0).mean()


def smoothness_loss(flow: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Variación total de primer orden ponderada por bordes: |∇flujo|·exp(−|∇imagen|)."""
    flow, image = _as_4d(flow), _as_4d(image)
    if flow.shape[-2:] != image.shape[-2:]:
        raise ConfigError("flujo e imagen deben tener la misma resolución")
    fdx = (flow[..., :, 1:] - flow[..., :, :-1]).abs().sum(dim=1)
    fdy = (flow[..., 1:, :] - flow[..., :-1, :]).abs().sum(dim=1)
    wx = torch.exp(-(image[..., :, 1:] - image[..., :, :-1]).abs().mean(dim=1))
    wy = torch.exp(-(image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=1))
    terms = []
    if fdx.numel():
        terms.append((fdx * wx).mean())
    if fdy.numel():
        terms.append((fdy * wy).mean())
    return torch.stack(terms).sum() if terms else flow.new_zeros(())


def photometric_loss(prev: torch.Tensor, warped: torch.Tensor, flow: torch.Tensor, cfg: FieldConfig) -> torch.Tensor:
    """α·Charbonnier + β·(1−SSIM)/2 + γ·suavidad."""
    return (
        cfg.alpha * charbonnier(prev - warped, cfg.epsilon)
        + cfg.beta * (1.0 - ssim(prev, warped, cfg.ssim_window)) / 2.0
        + cfg.gamma * smoothness_loss(flow, prev)
    )


# ---------------------------------------------------------------------------
# Geometría

def skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    return torch.stack(
        [
            torch.stack([zero, -v[..., 2], v[..., 1]], dim=-1),
            torch.stack([v[..., 2], zero, -v[..., 0]], dim=-1),
            torch.stack([-v[..., 1], v[..., 0], zero], dim=-1),
        ],
        dim=-2,
    )


def pose_to_matrix(pose: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(B,6) eje-ángulo + traslación → (R, t) con R = exp([ω]×), calculada en float64."""
    rotation = torch.linalg.matrix_exp(skew(pose[:, :3].double()))
    return rotation.to(pose.dtype), pose[:, 3:]


def reproject_pixels(depth: torch.Tensor, K: torch.Tensor, R: torch.Tensor, t: torch.Tensor, min_depth: float = 0.1) -> torch.Tensor:
    """Desproyecta cada píxel con su profundidad, aplica (R,t) y proyecta: (B,H,W) → (B,H,W,2)."""
    depth = _as_4d(depth)[:, 0].clamp_min(min_depth)
    b, h, w = depth.shape
    K = K.to(depth)
    pix = torch.cat([_pixel_grid(b, h, w, depth), torch.ones(b, h, w, 1, dtype=depth.dtype, device=depth.device)], dim=-1)
    rays = pix @ torch.linalg.inv(K).T
    points = rays * depth[..., None]
    moved = torch.einsum("bij,bhwj->bhwi", R.to(depth), points) + t.to(depth)[:, None, None, :]
    proj = moved @ K.T
    z = proj[..., 2:3].clamp_min(1e-6)
    return proj[..., :2] / z


class PoseRegressor(nn.Module):
    """CNN pequeña que regresa la transformación 6-DoF entre dos frames."""

    def __init__(self, in_chans: int = 6, width: int = 32, scale: float = 0.01):
        super().__init__()
        self.scale = scale
        self.net = nn.Sequential(
            nn.Conv2d(in_chans, width, 7, stride=2, padding=3),
            nn.ReLU(),
            nn.Conv2d(width, width * 2, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width * 2, 6, 1),
        )

    def forward(self, prev: torch.Tensor, current: torch.Tensor) -> torch.Tensor:
        return self.scale * self.net(torch.cat([prev, current], dim=1)).mean(dim=(2, 3))


# ---------------------------------------------------------------------------
# Pasos de entrenamiento

@dataclass
class FieldHeads:
    shear: DPTDecoder
    depth: DPTDecoder
    pose: PoseRegressor
    config: FieldConfig
    history: List[Dict[str, float]] = field(default_factory=list)

    def modules(self) -> Dict[str, nn.Module]:
        return {"shear_head": self.shear, "depth_head": self.depth, "pose_head": self.pose}


def build_field_heads(encoder: ViTEncoder, cfg: Optional[FieldConfig] = None) -> FieldHeads:
    cfg = cfg or FieldConfig()
    d = encoder.cfg.embed_dim
    return FieldHeads(
        shear=DPTDecoder(DPTConfig(embed_dim=d, features=cfg.features, out_channels=2)),
        depth=DPTDecoder(DPTConfig(embed_dim=d, features=cfg.features, out_channels=1)),
        pose=PoseRegressor(scale=cfg.pose_scale),
        config=cfg,
    )


def encoder_features(encoder: ViTEncoder, batch: torch.Tensor) -> Tuple[List[torch.Tensor], Tuple[int, ...]]:
    """Niveles intermedios para el DPT; sin gradiente si el encoder está congelado."""
    taps = feature_taps(encoder.cfg.depth)
    trainable = any(p.requires_grad for p in encoder.parameters())
    with torch.set_grad_enabled(trainable and torch.is_grad_enabled()):
        emb = encoder(batch, return_layers=taps)
    return emb.layers, emb.grid_shape


def predict_shear(encoder: ViTEncoder, head: DPTDecoder, batch: torch.Tensor) -> torch.Tensor:
    layers, grid = encoder_features(encoder, batch)
    return dpt_decode(layers, head, tuple(batch.shape[-2:]), grid)


def predict_depth(encoder: ViTEncoder, head: DPTDecoder, batch: torch.Tensor, min_depth: float) -> torch.Tensor:
    layers, grid = encoder_features(encoder, batch)
    raw = dpt_decode(layers, head, tuple(batch.shape[-2:]), grid)
    return min_depth + F.softplus(raw[:, 0])


def _check_finite(loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss):
        raise NumericalAbort(f"pérdida no finita en {what}", dump={"step": what, "loss": float(loss.detach())})


def shear_step(
    batch: torch.Tensor,
    encoder: ViTEncoder,
    head: DPTDecoder,
    optimizer: Optional[torch.optim.Optimizer],
    cfg: FieldConfig,
) -> Tuple[float, torch.Tensor]:
    """Un paso sobre la cabeza de cizalla; devuelve (pérdida, flujo B×2×H×W)."""
    current, prev = split_pair(batch)
    flow = predict_shear(encoder, head, batch)
    loss = photometric_loss(prev, warp(current, flow), flow, cfg)
    _check_finite(loss, "shear_step")
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.detach()), flow.detach()


def reprojection_loss(
    prev: torch.Tensor,
    current: torch.Tensor,
    depth: torch.Tensor,
    pose: torch.Tensor,
    intrinsics: SensorIntrinsics,
    min_depth: float = 0.1,
) -> torch.Tensor:
    """MSE entre I_{t−n} y I_t reproyectada con la profundidad de I_{t−n} y la pose relativa."""
    R, t = pose_to_matrix(pose)
    coords = reproject_pixels(depth, intrinsics.matrix(depth), R, t, min_depth)
    return F.mse_loss(sample_at(current, coords), prev)


def normal_step(
    batch: torch.Tensor,
    encoder: ViTEncoder,
    head: DPTDecoder,
    pose_head: PoseRegressor,
    intrinsics: SensorIntrinsics,
    optimizer: Optional[torch.optim.Optimizer],
    cfg: FieldConfig,
) -> Tuple[float, torch.Tensor]:
    """Un paso conjunto de profundidad y pose; devuelve (pérdida, campo normal B×H×W)."""
    current, prev = split_pair(batch)
    depth = predict_depth(encoder, head, batch, cfg.min_depth)
    pose = pose_head(prev, current)
    loss = reprojection_loss(prev, current, depth, pose, intrinsics, cfg.min_depth)
    _check_finite(loss, "normal_step")
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.detach()), depth_to_normal(depth.detach())


def depth_to_normal(depth: torch.Tensor) -> torch.Tensor:
    """Indentación relativa: mediana de la profundidad menos la profundidad (positiva hacia la cámara)."""
    med = depth.flatten(1).median(dim=1).values[:, None, None]
    return med - depth


def train_field_heads(
    encoder: ViTEncoder,
    pairs: torch.Tensor,
    cfg: Optional[FieldConfig] = None,
    heads: Optional[FieldHeads] = None,
    seed: int = 0,
    progress: bool = False,
) -> FieldHeads:
    """Bucle conjunto: en cada paso un `shear_step` y un `normal_step` sobre el mismo minilote."""
    cfg = cfg or FieldConfig()
    if pairs.shape[0] == 0:
        raise ConfigError("no hay pares para entrenar los campos")
    torch.manual_seed(seed)
    heads = heads or build_field_heads(encoder, cfg)
    flags = [p.requires_grad for p in encoder.parameters()]
    encoder.requires_grad_(False)
    encoder.eval()
    intrinsics = SensorIntrinsics.centered(pairs.shape[-2], pairs.shape[-1], cfg.focal)
    shear_opt = torch.optim.AdamW(heads.shear.parameters(), lr=cfg.lr)
    normal_opt = torch.optim.AdamW(list(heads.depth.parameters()) + list(heads.pose.parameters()), lr=cfg.lr)
    rng = rng_for(seed, STREAM_FIELD)
    try:
        for step in track(range(cfg.steps), description="campos", disable=not progress):
            idx = torch.from_numpy(rng.choice(pairs.shape[0], size=min(cfg.batch_size, pairs.shape[0]), replace=False))
            batch = pairs[idx]
            s_loss, _ = shear_step(batch, encoder, heads.shear, shear_opt, cfg)
            n_loss, _ = normal_step(batch, encoder, heads.depth, heads.pose, intrinsics, normal_opt, cfg)
            heads.history.append({"step": float(step), "shear_loss": s_loss, "normal_loss": n_loss})
    finally:
        for p, flag in zip(encoder.parameters(), flags):
            p.requires_grad_(flag)
    return heads


@torch.no_grad()
def predict_fields(encoder: ViTEncoder, heads: FieldHeads, batch: torch.Tensor) -> List[FieldPair]:
    encoder.eval()
    flow = predict_shear(encoder, heads.shear, batch)
    normal = depth_to_normal(predict_depth(encoder, heads.depth, batch, heads.config.min_depth))
    h, w = batch.shape[-2:]
    diag = math.hypot(h, w)
    out = []
    for n, f in zip(normal, flow):
        shear = f.permute(1, 2, 0).double().numpy()
        mag = np.linalg.norm(shear, axis=-1, keepdims=True)
        shear = np.where(mag > diag, shear * diag / np.maximum(mag, 1e-12), shear)
        out.append(FieldPair(normal_field=n.double().numpy(), shear_field=shear))
    return out


# ---------------------------------------------------------------------------
# Formato .raw + .hdr

def save_raw_field(path: Path, array: np.ndarray, kind: str) -> Tuple[Path, Path]:
    """Escribe `<path>.raw` (little-endian float32) y `<path>.hdr` con dims, dtype y kind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_path, hdr_path = path.with_suffix(".raw"), path.with_suffix(".hdr")
    data = np.ascontiguousarray(array, dtype=RAW_DTYPES["float32"])
    raw_path.write_bytes(data.tobytes())
    hdr_path.write_text(
        f"dims = {' '.join(str(d) for d in data.shape)}\ndtype = float32\nkind = {kind}\n", encoding="utf-8"
    )
    return raw_path, hdr_path


def load_raw_field(path: Path) -> Tuple[np.ndarray, str]:
    path = Path(path)
    header: Dict[str, str] = {}
    for line in path.with_suffix(".hdr").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    try:
        dims = tuple(int(d) for d in header["dims"].split())
        dtype = RAW_DTYPES[header["dtype"]]
    except KeyError as exc:
        raise ConfigError(f"cabecera {path.with_suffix('.hdr')} incompleta: {exc}") from None
    data = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ConfigError(f"{path.with_suffix('.raw')}: {data.size} valores, se esperaban {int(np.prod(dims))}")
    return data.reshape(dims).astype(np.float32), header.get("kind", "")
