"""Cabezas sobre el backbone: pooling atentivo, MLP de tarea y decoder denso estilo DPT."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from timm.layers import Mlp, trunc_normal_

from .encoder import TokenEmbeddings
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class AttentiveProbeConfig:
    embed_dim: int = 768
    n_heads: int = 12
    mlp_ratio: float = 4.0
    depth: int = 1
    layer_norm: bool = True
    n_queries: int = 1

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError("embed_dim debe ser divisible por n_heads")
        if self.depth < 1 or self.n_queries < 1:
            raise ConfigError("depth y n_queries deben ser >= 1")


class CrossAttention(nn.Module):
    """Atención multi-cabeza de consultas sobre tokens, sin información posicional."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def attend(self, q: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """softmax(QKᵀ/√d)·V por cabeza, antes de la proyección de salida."""
        qh = rearrange(self.q(q), "b m (h d) -> b h m d", h=self.n_heads)
        kh = rearrange(self.k(x), "b n (h d) -> b h n d", h=self.n_heads)
        vh = rearrange(self.v(x), "b n (h d) -> b h n d", h=self.n_heads)
        weights = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        return rearrange(weights @ vh, "b h m d -> b m (h d)")

    def forward(self, q: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.attend(q, x))


class CrossBlock(nn.Module):
    def __init__(self, cfg: AttentiveProbeConfig):
        super().__init__()
        norm = nn.LayerNorm if cfg.layer_norm else nn.Identity
        self.norm1 = norm(cfg.embed_dim)
        self.xattn = CrossAttention(cfg.embed_dim, cfg.n_heads)
        self.norm2 = norm(cfg.embed_dim)
        self.mlp = Mlp(cfg.embed_dim, hidden_features=int(cfg.embed_dim * cfg.mlp_ratio))

    def forward(self, q: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        q = q + self.xattn(q, self.norm1(x))
        return q + self.mlp(self.norm2(q))


class AttentivePooler(nn.Module):
    """Una consulta aprendida atiende sobre todos los tokens de parche."""

    def __init__(self, cfg: AttentiveProbeConfig):
        super().__init__()
        self.cfg = cfg
        self.query = nn.Parameter(torch.zeros(1, cfg.n_queries, cfg.embed_dim))
        trunc_normal_(self.query, std=0.02)
        self.blocks = nn.ModuleList([CrossBlock(cfg) for _ in range(cfg.depth)])

    def forward(self, tokens: Union[TokenEmbeddings, torch.Tensor]) -> torch.Tensor:
        x = tokens.tokens if isinstance(tokens, TokenEmbeddings) else tokens
        if x.dim() != 3 or x.shape[1] == 0:
            raise ConfigError("attentive_pool requiere al menos un token")
        q = self.query.expand(x.shape[0], -1, -1).to(x.dtype)
        for blk in self.blocks:
            q = blk(q, x)
        return q[:, 0] if self.cfg.n_queries == 1 else q


def attentive_pool(tokens: Union[TokenEmbeddings, torch.Tensor], pooler: AttentivePooler) -> torch.Tensor:
    return pooler(tokens)


class MLPHead(nn.Module):
    """Lineal → GELU → lineal, con capa oculta de D/4."""

    def __init__(self, embed_dim: int, out_dim: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or max(embed_dim // 4, 1)
        self.net = nn.Sequential(nn.Linear(embed_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


# ---------------------------------------------------------------------------
# Decoder denso

@dataclass
class DPTConfig:
    embed_dim: int
    features: int = 64
    layer_channels: Tuple[int, int, int, int] = (32, 64, 128, 128)
    out_channels: int = 2
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        if self.activation not in ("relu", "gelu", "identity"):
            raise ConfigError(f"activación desconocida: {self.activation}")
        if len(self.layer_channels) != 4:
            raise ConfigError("layer_channels debe tener 4 niveles")


def _activation(name: str) -> nn.Module:
    return {"relu": nn.ReLU(), "gelu": nn.GELU(), "identity": nn.Identity()}[name]


def tokens_to_map(tokens: torch.Tensor, grid: Sequence[int]) -> torch.Tensor:
    """B×N×D → B×D×gh×gw; los clips se promedian sobre el eje temporal."""
    if len(grid) == 3:
        gt, gh, gw = grid
        return rearrange(tokens, "b (gt gh gw) d -> b gt d gh gw", gt=gt, gh=gh, gw=gw).mean(dim=1)
    gh, gw = grid
    return rearrange(tokens, "b (gh gw) d -> b d gh gw", gh=gh, gw=gw)


class Reassemble(nn.Module):
    def __init__(self, cfg: DPTConfig, channels: int, scale: float):
        super().__init__()
        self.project = nn.Conv2d(cfg.embed_dim, channels, kernel_size=1, bias=cfg.bias)
        if scale == 4:
            self.resample = nn.ConvTranspose2d(channels, channels, kernel_size=4, stride=4, bias=cfg.bias)
        elif scale == 2:
            self.resample = nn.ConvTranspose2d(channels, channels, kernel_size=2, stride=2, bias=cfg.bias)
        elif scale == 1:
            self.resample = nn.Identity()
        else:
            self.resample = nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1, bias=cfg.bias)
        self.out = nn.Conv2d(channels, cfg.features, kernel_size=3, padding=1, bias=False)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.out(self.resample(self.project(fmap)))


class ResidualConvUnit(nn.Module):
    def __init__(self, features: int, activation: str, bias: bool):
        super().__init__()
        self.act = _activation(activation)
        self.conv1 = nn.Conv2d(features, features, kernel_size=3, padding=1, bias=bias)
        self.conv2 = nn.Conv2d(features, features, kernel_size=3, padding=1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(self.act(x))))


class FeatureFusion(nn.Module):
    def __init__(self, cfg: DPTConfig):
        super().__init__()
        self.res1 = ResidualConvUnit(cfg.features, cfg.activation, cfg.bias)
        self.res2 = ResidualConvUnit(cfg.features, cfg.activation, cfg.bias)
        self.out = nn.Conv2d(cfg.features, cfg.features, kernel_size=1, bias=cfg.bias)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor], size: Tuple[int, int]) -> torch.Tensor:
        if skip is not None:
            x = x + self.res1(skip)
        x = self.res2(x)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=True)
        return self.out(x)


class DPTDecoder(nn.Module):
    """Reensambla 4 niveles de tokens (×4, ×2, ×1, ×½), los fusiona y sube a resolución completa."""

    SCALES: Tuple[float, ...] = (4, 2, 1, 0.5)

    def __init__(self, cfg: DPTConfig):
        super().__init__()
        self.cfg = cfg
        self.reassemble = nn.ModuleList([Reassemble(cfg, c, s) for c, s in zip(cfg.layer_channels, self.SCALES)])
        self.fusion = nn.ModuleList([FeatureFusion(cfg) for _ in range(4)])
        half = max(cfg.features // 2, 1)
        self.head = nn.Sequential(
            nn.Conv2d(cfg.features, half, kernel_size=3, padding=1, bias=cfg.bias),
            _activation(cfg.activation),
            nn.Conv2d(half, cfg.out_channels, kernel_size=1, bias=cfg.bias),
        )

    def forward(self, features: Sequence[torch.Tensor], grid: Sequence[int], target_shape: Tuple[int, int]) -> torch.Tensor:
        if len(features) != 4:
            raise ConfigError(f"dpt_decode necesita 4 niveles, recibidos {len(features)}")
        maps = [r(tokens_to_map(f, grid)) for r, f in zip(self.reassemble, features)]
        a1, a2, a3, a4 = maps
        x = self.fusion[3](a4, None, a3.shape[-2:])
        x = self.fusion[2](x, a3, a2.shape[-2:])
        x = self.fusion[1](x, a2, a1.shape[-2:])
        x = self.fusion[0](x, a1, (a1.shape[-2] * 2, a1.shape[-1] * 2))
        x = self.head[0](x)
        x = F.interpolate(x, size=tuple(target_shape), mode="bilinear", align_corners=True)
        return self.head[2](self.head[1](x))


def dpt_decode(features: Union[TokenEmbeddings, Sequence[torch.Tensor]], decoder: DPTDecoder, target_shape: Tuple[int, int], grid: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Mapa denso B×C×h×w a partir de los niveles intermedios del encoder."""
    if isinstance(features, TokenEmbeddings):
        grid = features.grid_shape
        features = features.layers
    if grid is None:
        raise ConfigError("dpt_decode necesita la forma de la rejilla")
    return decoder(features, grid, target_shape)
