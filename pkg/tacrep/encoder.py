"""Backbone ViT compartido: patchify, embeddings sin-cos fijos, registros y checkpoints.

No hay token de clase: la salida son los tokens de parche más los registros.
El modo IMAGE6 trocea pares de 6 canales en parches p×p; el modo CLIP trocea
clips de 4 frames en tubelets de `tubelet` frames × p × p × 3.
"""

from __future__ import annotations

import json
import logging
import os
import pickle
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange
from timm.layers import trunc_normal_
from timm.models.vision_transformer import Block

from .errors import ConfigError, NumericalAbort
from .utils import parse_enum
from .windows import TactileWindow, WindowMode, window_to_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REFERENCE_TAPS: Tuple[int, ...] = (2, 5, 8, 11)


class TokenMode(str, Enum):
    IMAGE6 = "IMAGE6"
    CLIP = "CLIP"


class PosEmbedding(str, Enum):
    SINCOS_2D = "fixed_sincos_2d"
    SINCOS_3D = "fixed_sincos_3d"


@dataclass
class EncoderConfig:
    patch_size: int = 14
    embed_dim: int = 768
    depth: int = 12
    n_heads: int = 12
    mlp_ratio: float = 4.0
    n_registers: int = 4
    mode: TokenMode = TokenMode.IMAGE6
    pos_embedding: Optional[PosEmbedding] = None
    img_size: int = 224
    tubelet: int = 2
    n_frames: int = 4
    drop_path: float = 0.0

    def __post_init__(self):
        self.mode = parse_enum(TokenMode, self.mode)
        if self.pos_embedding is None:
            self.pos_embedding = PosEmbedding.SINCOS_3D if self.mode is TokenMode.CLIP else PosEmbedding.SINCOS_2D
        self.pos_embedding = parse_enum(PosEmbedding, self.pos_embedding)
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} no es divisible por n_heads {self.n_heads}")
        if self.img_size % self.patch_size != 0:
            raise ConfigError(f"img_size {self.img_size} no es divisible por patch_size {self.patch_size}")
        if self.depth < 1 or self.n_registers < 0:
            raise ConfigError("depth >= 1 y n_registers >= 0")
        if self.pos_embedding is PosEmbedding.SINCOS_2D and self.embed_dim % 4 != 0:
            raise ConfigError("sincos 2D requiere embed_dim múltiplo de 4")
        if self.pos_embedding is PosEmbedding.SINCOS_3D and (self.embed_dim % 2 != 0 or self.embed_dim < 6):
            raise ConfigError("sincos 3D requiere embed_dim par y >= 6")
        if self.mode is TokenMode.CLIP and self.n_frames % self.tubelet != 0:
            raise ConfigError("n_frames debe ser múltiplo de tubelet")

    @property
    def in_chans(self) -> int:
        return 6 if self.mode is TokenMode.IMAGE6 else 3

    @property
    def patch_dim(self) -> int:
        t = self.tubelet if self.mode is TokenMode.CLIP else 1
        return t * self.patch_size * self.patch_size * self.in_chans

    def grid(self, side: Optional[Union[int, Tuple[int, int]]] = None) -> Tuple[int, ...]:
        h, w = (side, side) if isinstance(side, int) else (side or (self.img_size, self.img_size))
        gh, gw = h // self.patch_size, w // self.patch_size
        if self.mode is TokenMode.CLIP:
            return (self.n_frames // self.tubelet, gh, gw)
        return (gh, gw)

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid()))

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        raw["mode"] = self.mode.value
        raw["pos_embedding"] = self.pos_embedding.value
        return raw

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"claves desconocidas en EncoderConfig: {sorted(unknown)}")
        return cls(**raw)


ENCODER_PRESETS: Dict[str, Dict[str, Any]] = {
    "base": dict(embed_dim=768, depth=12, n_heads=12),
    "small": dict(embed_dim=384, depth=12, n_heads=6),
    "tiny": dict(embed_dim=64, depth=4, n_heads=4, patch_size=14, img_size=112),
}


def encoder_preset(name: str, **overrides: Any) -> EncoderConfig:
    try:
        base = dict(ENCODER_PRESETS[name])
    except KeyError:
        raise ConfigError(f"preset de encoder desconocido: {name} (opciones: {sorted(ENCODER_PRESETS)})") from None
    base.update(overrides)
    return EncoderConfig(**base)


def feature_taps(depth: int) -> List[int]:
    """Índices de bloque [2,5,8,11] reescalados a `depth` (redondeo hacia abajo)."""
    return [d * depth // 12 for d in REFERENCE_TAPS]


# ---------------------------------------------------------------------------
# Embeddings posicionales

def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    if dim % 2 != 0:
        raise ConfigError("la dimensión sincos 1D debe ser par")
    omega = np.arange(dim // 2, dtype=np.float64)
    omega /= dim / 2.0
    omega = 1.0 / 10000**omega
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid: Sequence[int], dim: int) -> np.ndarray:
    """Embedding sin-cos fijo (N×dim) para una rejilla 2D (gh,gw) o 3D (gt,gh,gw), en orden de filas."""
    if len(grid) == 2:
        gh, gw = grid
        hh, ww = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
        return np.concatenate([sincos_1d(dim // 2, hh), sincos_1d(dim // 2, ww)], axis=1)
    if len(grid) == 3:
        gt, gh, gw = grid
        d_s = (dim // 3) // 2 * 2
        d_t = dim - 2 * d_s
        tt, hh, ww = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
        return np.concatenate([sincos_1d(d_t, tt), sincos_1d(d_s, hh), sincos_1d(d_s, ww)], axis=1)
    raise ConfigError(f"rejilla de dimensión no soportada: {grid}")


# ---------------------------------------------------------------------------
# Patchify

def _as_batch(x: Union[TactileWindow, torch.Tensor], cfg: EncoderConfig) -> torch.Tensor:
    if isinstance(x, TactileWindow):
        expected = WindowMode.PAIR if cfg.mode is TokenMode.IMAGE6 else WindowMode.CLIP
        if x.mode is not expected:
            raise ConfigError(f"ventana {x.mode.value} incompatible con el modo {cfg.mode.value}")
        x = window_to_tensor(x).unsqueeze(0)
    want = 4 if cfg.mode is TokenMode.IMAGE6 else 5
    if x.dim() == want - 1:
        x = x.unsqueeze(0)
    if x.dim() != want:
        raise ConfigError(f"entrada de forma {tuple(x.shape)} no válida para el modo {cfg.mode.value}")
    return x


def patchify(x: Union[TactileWindow, torch.Tensor], cfg: EncoderConfig) -> torch.Tensor:
    """(B,6,H,W) → (B, gh·gw, p·p·6); (B,T,3,H,W) → (B, gt·gh·gw, tubelet·p·p·3)."""
    x = _as_batch(x, cfg)
    p = cfg.patch_size
    h, w = x.shape[-2:]
    if h % p or w % p:
        raise ConfigError(f"dimensiones {h}×{w} no divisibles por patch_size {p}")
    if cfg.mode is TokenMode.IMAGE6:
        if x.shape[1] != 6:
            raise ConfigError(f"se esperaban 6 canales, recibido {x.shape[1]}")
        return rearrange(x, "b c (gh p) (gw q) -> b (gh gw) (p q c)", p=p, q=p)
    if x.shape[1] % cfg.tubelet or x.shape[2] != 3:
        raise ConfigError(f"clip de forma {tuple(x.shape)} incompatible con tubelet {cfg.tubelet}")
    return rearrange(x, "b (gt tt) c (gh p) (gw q) -> b (gt gh gw) (tt p q c)", tt=cfg.tubelet, p=p, q=p)


def unpatchify(patches: torch.Tensor, cfg: EncoderConfig, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Inversa exacta de `patchify`."""
    h, w = size or (cfg.img_size, cfg.img_size)
    p = cfg.patch_size
    gh, gw = h // p, w // p
    if cfg.mode is TokenMode.IMAGE6:
        return rearrange(patches, "b (gh gw) (p q c) -> b c (gh p) (gw q)", gh=gh, gw=gw, p=p, q=p)
    return rearrange(patches, "b (gt gh gw) (tt p q c) -> b (gt tt) c (gh p) (gw q)", gh=gh, gw=gw, tt=cfg.tubelet, p=p, q=p)


def spatial_size(x: torch.Tensor) -> Tuple[int, int]:
    return int(x.shape[-2]), int(x.shape[-1])


# ---------------------------------------------------------------------------
# Encoder

@dataclass
class TokenEmbeddings:
    tokens: torch.Tensor  # B×N×D
    grid_shape: Tuple[int, ...]
    registers: torch.Tensor  # B×R×D
    layers: List[torch.Tensor] = field(default_factory=list)


class ViTEncoder(nn.Module):
    """ViT pre-norm sin token de clase, con registros y embeddings sin-cos fijos."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.registers = nn.Parameter(torch.zeros(1, cfg.n_registers, d)) if cfg.n_registers else None
        dpr = np.linspace(0.0, cfg.drop_path, cfg.depth).tolist()
        self.blocks = nn.ModuleList(
            [
                Block(d, cfg.n_heads, mlp_ratio=cfg.mlp_ratio, qkv_bias=True, drop_path=dpr[i], norm_layer=nn.LayerNorm)
                for i in range(cfg.depth)
            ]
        )
        self.norm = nn.LayerNorm(d)
        self._pos_cache: Dict[Tuple[int, ...], torch.Tensor] = {}
        self.apply(self._init_weights)
        if self.registers is not None:
            trunc_normal_(self.registers, std=0.02)

    @staticmethod
    def _init_weights(m: nn.Module) -> None:
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def pos_embed(self, grid: Tuple[int, ...], like: torch.Tensor) -> torch.Tensor:
        cached = self._pos_cache.get(grid)
        if cached is None:
            cached = torch.from_numpy(sincos_pos_embed(grid, self.cfg.embed_dim))
            self._pos_cache[grid] = cached
        return cached.to(device=like.device, dtype=like.dtype)

    def grid_for(self, x: torch.Tensor) -> Tuple[int, ...]:
        return self.cfg.grid(spatial_size(x))

    def embed(self, x: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, ...]]:
        """Tokens de parche con posición, antes de los bloques."""
        x = _as_batch(x, self.cfg)
        grid = self.grid_for(x)
        tokens = self.patch_embed(patchify(x, self.cfg))
        return tokens + self.pos_embed(grid, tokens), grid

    def forward_tokens(
        self,
        tokens: torch.Tensor,
        grid: Tuple[int, ...],
        return_layers: Optional[Sequence[int]] = None,
    ) -> TokenEmbeddings:
        b = tokens.shape[0]
        r = self.cfg.n_registers
        if self.registers is not None:
            tokens = torch.cat([self.registers.expand(b, -1, -1), tokens], dim=1)
        taps = set(return_layers or ())
        layers: List[torch.Tensor] = []
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens)
            if i in taps:
                layers.append(tokens[:, r:])
        if return_layers:
            # el orden de salida sigue al de return_layers (admite índices repetidos)
            by_index = dict(zip(sorted(taps), layers))
            layers = [by_index[i] for i in return_layers]
        tokens = self.norm(tokens)
        return TokenEmbeddings(tokens=tokens[:, r:], grid_shape=grid, registers=tokens[:, :r], layers=layers)

    def forward(
        self,
        x: torch.Tensor,
        keep_idx: Optional[torch.Tensor] = None,
        return_layers: Optional[Sequence[int]] = None,
    ) -> TokenEmbeddings:
        tokens, grid = self.embed(x)
        if keep_idx is not None:
            tokens = gather_tokens(tokens, keep_idx)
        return self.forward_tokens(tokens, grid, return_layers)


def gather_tokens(tokens: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Selecciona tokens por índice; `idx` es (K,) compartido o (B,K) por muestra."""
    idx = idx.to(tokens.device)
    if idx.dim() == 1:
        return tokens[:, idx]
    return torch.gather(tokens, 1, idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1]))


def check_finite_params(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalAbort(f"parámetro no finito: {name}", dump={"parameter": name})


def encode(
    window: Union[TactileWindow, torch.Tensor],
    encoder: ViTEncoder,
    return_layers: Optional[Sequence[int]] = None,
) -> TokenEmbeddings:
    """Codifica una ventana (o lote) comprobando antes que los parámetros sean finitos."""
    check_finite_params(encoder)
    return encoder(_as_batch(window, encoder.cfg), return_layers=return_layers)


def parameter_count(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    encoder: Dict[str, torch.Tensor]
    heads: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)
    optimizer: Optional[Dict[str, Any]] = None
    ema: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)
    step: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)
    aux: Dict[str, Any] = field(default_factory=dict)

    def build_encoder(self) -> ViTEncoder:
        model = ViTEncoder(self.encoder_config)
        model.load_state_dict(self.encoder)
        return model


def save_checkpoint(
    path: Path,
    encoder: ViTEncoder,
    heads: Optional[Dict[str, nn.Module]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    ema: Optional[Dict[str, nn.Module]] = None,
    step: int = 0,
    extra: Optional[Dict[str, Any]] = None,
    aux: Optional[Dict[str, Any]] = None,
) -> Path:
    """Escribe un único archivo `torch.save` de forma atómica (tmp + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": json.dumps(encoder.cfg.to_dict(), sort_keys=True),
        "encoder": encoder.state_dict(),
        "heads": {k: m.state_dict() for k, m in (heads or {}).items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "ema": {k: m.state_dict() for k, m in (ema or {}).items()},
        "step": int(step),
        "extra": json.dumps(extra or {}, sort_keys=True),
        "aux": aux or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigError(f"checkpoint ilegible {path}: {exc}") from exc
    version = raw.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: format_version {version} no soportada (se espera {CHECKPOINT_VERSION})")
    return Checkpoint(
        encoder_config=EncoderConfig.from_dict(json.loads(raw["encoder_config"])),
        encoder=raw["encoder"],
        heads=raw.get("heads") or {},
        optimizer=raw.get("optimizer"),
        ema=raw.get("ema") or {},
        step=int(raw.get("step", 0)),
        extra=json.loads(raw.get("extra") or "{}"),
        aux=raw.get("aux") or {},
    )
