"""Los cuatro objetivos de preentrenamiento sobre el encoder compartido.

MAE reconstruye píxeles de parches enmascarados, DINO destila entre recortes
con un profesor EMA, I-JEPA y V-JEPA predicen latentes del profesor en bloques
(o tubos) enmascarados. Cada paso se divide en `plan_step` (todo lo aleatorio:
máscara, recortes, lr) y `compute_loss` (determinista dado el plan), de modo
que los chequeos de gradiente reutilizan exactamente el mismo plan.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from timm.layers import trunc_normal_
from timm.models.vision_transformer import Block
from torchvision.transforms.v2 import functional as TF

from .ema import EMAState, ema_update
from .encoder import EncoderConfig, TokenEmbeddings, TokenMode, ViTEncoder, patchify, sincos_pos_embed
from .errors import ConfigError, NumericalAbort
from .losses import DinoHeadState, detect_collapse, dino_loss, jepa_loss, mae_loss, psnr, teacher_probs, update_center
from .masks import MaskSpec, sample_block_mask, sample_random_mask, sample_tube_mask
from .schedules import ScheduleConfig, apply_schedule, build_optimizer, lr_at, teacher_temp_at, trainable, wd_at
from .utils import parse_enum, rng_for
from .windows import TactileWindow, resize_for_encoder, window_to_tensor

logger = logging.getLogger(__name__)

STREAM_PLAN = 1


class Objective(str, Enum):
    MAE = "MAE"
    DINO = "DINO"
    IJEPA = "IJEPA"
    VJEPA = "VJEPA"


# Hiperparámetros por objetivo de la tabla de entrenamiento (lr, lote, EMA)
OBJECTIVE_SCHEDULES: Dict[Objective, Dict[str, Any]] = {
    Objective.MAE: dict(base_lr=1e-4, batch_size=100),
    Objective.DINO: dict(base_lr=1e-4, batch_size=150),
    Objective.IJEPA: dict(base_lr=6.25e-4, batch_size=150),
    Objective.VJEPA: dict(base_lr=6.25e-4, batch_size=150),
}
EMA_MOMENTUM: Dict[Objective, float] = {Objective.DINO: 0.998, Objective.IJEPA: 0.996, Objective.VJEPA: 0.996}


@dataclass
class ObjectiveConfig:
    objective: Objective = Objective.MAE
    # MAE
    mask_ratio: float = 0.75
    norm_pix: bool = True
    decoder_dim: int = 256
    decoder_depth: int = 4
    decoder_heads: int = 8
    # DINO
    n_prototypes: int = 4096
    head_hidden: int = 2048
    head_bottleneck: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_temp_warmup_from: float = 0.02
    teacher_temp_warmup_steps: int = 30
    center_momentum: float = 0.9
    centering: bool = True
    global_crops: int = 2
    global_scale: Tuple[float, float] = (0.6, 1.0)
    local_crops: int = 6
    local_scale: Tuple[float, float] = (0.2, 0.5)
    # I-JEPA / V-JEPA
    n_targets: int = 4
    target_scale: Tuple[float, float] = (0.15, 0.2)
    target_aspect: Tuple[float, float] = (0.75, 1.5)
    context_scale: Tuple[float, float] = (0.85, 1.0)
    tube_ratio: float = 0.15
    tube_blocks: int = 8
    predictor_dim: int = 384
    predictor_depth: int = 6
    predictor_heads: int = 12
    # EMA
    ema_momentum: Optional[float] = None
    ema_schedule: str = "constant"

    def __post_init__(self):
        self.objective = parse_enum(Objective, self.objective)
        for name in ("global_scale", "local_scale", "target_scale", "target_aspect", "context_scale"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.ema_momentum is None and self.objective in EMA_MOMENTUM:
            self.ema_momentum = EMA_MOMENTUM[self.objective]
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio debe estar en (0,1)")
        if self.student_temp <= 0 or self.teacher_temp <= 0 or self.teacher_temp_warmup_from <= 0:
            raise ConfigError("las temperaturas deben ser > 0")
        if self.teacher_temp_warmup_steps < 0:
            raise ConfigError("teacher_temp_warmup_steps debe ser >= 0")
        if self.global_crops < 1 or self.local_crops < 0:
            raise ConfigError("global_crops >= 1 y local_crops >= 0")
        if self.objective is Objective.DINO and self.global_crops + self.local_crops < 2:
            raise ConfigError("DINO necesita al menos dos vistas")
        if self.decoder_dim % self.decoder_heads or self.decoder_dim % 4:
            raise ConfigError("decoder_dim debe ser múltiplo de decoder_heads y de 4")
        if self.predictor_dim % self.predictor_heads or self.predictor_dim % 4:
            raise ConfigError("predictor_dim debe ser múltiplo de predictor_heads y de 4")
        if self.n_targets < 1 or self.tube_blocks < 1:
            raise ConfigError("n_targets y tube_blocks deben ser >= 1")

    @property
    def required_mode(self) -> TokenMode:
        return TokenMode.CLIP if self.objective is Objective.VJEPA else TokenMode.IMAGE6

    @property
    def uses_teacher(self) -> bool:
        return self.objective is not Objective.MAE

    def schedule_defaults(self) -> Dict[str, Any]:
        return dict(OBJECTIVE_SCHEDULES[self.objective])

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ObjectiveConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"claves desconocidas en ObjectiveConfig: {sorted(unknown)}")
        return cls(**raw)


@lru_cache(maxsize=64)
def _pos_table(grid: Tuple[int, ...], dim: int) -> torch.Tensor:
    return torch.from_numpy(sincos_pos_embed(grid, dim))


def pos_table(grid: Sequence[int], dim: int, like: torch.Tensor) -> torch.Tensor:
    return _pos_table(tuple(int(g) for g in grid), dim).to(device=like.device, dtype=like.dtype)


def _blocks(dim: int, depth: int, heads: int) -> nn.ModuleList:
    return nn.ModuleList([Block(dim, heads, mlp_ratio=4.0, qkv_bias=True, norm_layer=nn.LayerNorm) for _ in range(depth)])


def _init_linear(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# Cabezas de cada objetivo

class MAEDecoder(nn.Module):
    """Decoder transformer ligero: tokens visibles + mask tokens → píxeles por parche."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: ObjectiveConfig):
        super().__init__()
        self.dim = cfg.decoder_dim
        self.embed = nn.Linear(enc_cfg.embed_dim, self.dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, self.dim))
        self.blocks = _blocks(self.dim, cfg.decoder_depth, cfg.decoder_heads)
        self.norm = nn.LayerNorm(self.dim)
        self.pred = nn.Linear(self.dim, enc_cfg.patch_dim)
        self.apply(_init_linear)
        trunc_normal_(self.mask_token, std=0.02)

    def forward(self, visible: torch.Tensor, mask: MaskSpec, grid: Sequence[int]) -> torch.Tensor:
        x = self.embed(visible)
        full = self.mask_token.to(x.dtype).expand(x.shape[0], mask.n_tokens, -1).clone()
        full[:, mask.visible().to(x.device)] = x
        full = full + pos_table(grid, self.dim, full)
        for blk in self.blocks:
            full = blk(full)
        return self.pred(self.norm(full))


class Predictor(nn.Module):
    """ViT estrecho: contexto + mask tokens con la posición de cada objetivo → un latente por objetivo."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: ObjectiveConfig):
        super().__init__()
        self.dim = cfg.predictor_dim
        self.embed = nn.Linear(enc_cfg.embed_dim, self.dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, self.dim))
        self.blocks = _blocks(self.dim, cfg.predictor_depth, cfg.predictor_heads)
        self.norm = nn.LayerNorm(self.dim)
        self.proj = nn.Linear(self.dim, enc_cfg.embed_dim)
        self.apply(_init_linear)
        trunc_normal_(self.mask_token, std=0.02)

    def forward(
        self,
        context: torch.Tensor,
        context_idx: Union[np.ndarray, torch.Tensor],
        target_idx: Union[np.ndarray, torch.Tensor],
        grid: Sequence[int],
    ) -> torch.Tensor:
        context_idx = torch.as_tensor(context_idx, dtype=torch.long, device=context.device)
        target_idx = torch.as_tensor(target_idx, dtype=torch.long, device=context.device)
        if target_idx.numel() == 0:
            raise ConfigError("el predictor necesita al menos un token objetivo")
        if context.shape[1] == 0 or context_idx.numel() != context.shape[1]:
            raise ConfigError("contexto vacío o desalineado con sus posiciones")
        x = self.embed(context)
        pos = pos_table(grid, self.dim, x)
        x = x + pos[context_idx]
        queries = self.mask_token.to(x.dtype).expand(x.shape[0], target_idx.numel(), -1) + pos[target_idx]
        x = torch.cat([x, queries], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return self.proj(self.norm(x[:, context.shape[1]:]))


def predictor_forward(
    context_latents: torch.Tensor,
    target_positions: Union[np.ndarray, torch.Tensor],
    predictor: Predictor,
    context_positions: Union[np.ndarray, torch.Tensor],
    grid: Sequence[int],
) -> torch.Tensor:
    return predictor(context_latents, context_positions, target_positions, grid)


class DINOHead(nn.Module):
    """MLP de 3 capas, cuello de botella L2-normalizado y capa de prototipos con pesos normalizados."""

    def __init__(self, in_dim: int, cfg: ObjectiveConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.head_hidden),
            nn.GELU(),
            nn.Linear(cfg.head_hidden, cfg.head_hidden),
            nn.GELU(),
            nn.Linear(cfg.head_hidden, cfg.head_bottleneck),
        )
        self.prototypes = nn.Parameter(torch.empty(cfg.n_prototypes, cfg.head_bottleneck))
        self.apply(_init_linear)
        trunc_normal_(self.prototypes, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(x), dim=-1)
        return F.linear(z, F.normalize(self.prototypes, dim=-1))


def summary_token(emb: TokenEmbeddings) -> torch.Tensor:
    """Resumen global de una vista: media de los registros (o de los parches si no hay registros)."""
    if emb.registers.shape[1] > 0:
        return emb.registers.mean(dim=1)
    return emb.tokens.mean(dim=1)


# ---------------------------------------------------------------------------
# Recortes multi-crop

@dataclass
class CropBox:
    top: int
    left: int
    height: int
    width: int
    out_size: int
    is_global: bool


def _crop_rect(side: int, scale: Tuple[float, float], rng: np.random.Generator) -> Tuple[int, int, int, int]:
    s = float(rng.uniform(*scale)) if scale[0] != scale[1] else float(scale[0])
    aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    area = s * side * side
    h = min(max(int(round(math.sqrt(area / aspect))), 1), side)
    w = min(max(int(round(math.sqrt(area * aspect))), 1), side)
    return int(rng.integers(0, side - h + 1)), int(rng.integers(0, side - w + 1)), h, w


def local_side(side: int, patch: int) -> int:
    return max(patch, (side // 2) // patch * patch)


def sample_crops(side: int, patch: int, cfg: ObjectiveConfig, rng: np.random.Generator) -> List[CropBox]:
    """Vistas globales primero y locales después; todas comparten recorte en el lote."""
    crops = [CropBox(*_crop_rect(side, cfg.global_scale, rng), out_size=side, is_global=True) for _ in range(cfg.global_crops)]
    small = local_side(side, patch)
    crops += [CropBox(*_crop_rect(side, cfg.local_scale, rng), out_size=small, is_global=False) for _ in range(cfg.local_crops)]
    return crops


def crop_views(batch: torch.Tensor, crops: Sequence[CropBox]) -> List[torch.Tensor]:
    return [
        TF.resized_crop(batch, c.top, c.left, c.height, c.width, [c.out_size, c.out_size], antialias=True)
        for c in crops
    ]


# ---------------------------------------------------------------------------
# Estado y paso

@dataclass
class PretrainState:
    objective: ObjectiveConfig
    schedule: ScheduleConfig
    encoder: ViTEncoder
    heads: nn.ModuleDict
    optimizer: torch.optim.Optimizer
    ema: Optional[EMAState] = None
    dino: Optional[DinoHeadState] = None
    step: int = 0
    seed: int = 0

    @property
    def kind(self) -> Objective:
        return self.objective.objective

    def student(self) -> nn.ModuleDict:
        """Módulos que el profesor EMA refleja."""
        mods: Dict[str, nn.Module] = {"encoder": self.encoder}
        if self.kind is Objective.DINO:
            mods["dino_head"] = self.heads["dino_head"]
        return nn.ModuleDict(mods)

    def modules(self) -> Dict[str, nn.Module]:
        return {"encoder": self.encoder, **dict(self.heads.items())}

    def train(self, mode: bool = True) -> None:
        self.encoder.train(mode)
        self.heads.train(mode)


def build_heads(enc_cfg: EncoderConfig, cfg: ObjectiveConfig) -> nn.ModuleDict:
    if cfg.objective is Objective.MAE:
        return nn.ModuleDict({"decoder": MAEDecoder(enc_cfg, cfg)})
    if cfg.objective is Objective.DINO:
        return nn.ModuleDict({"dino_head": DINOHead(enc_cfg.embed_dim, cfg)})
    return nn.ModuleDict({"predictor": Predictor(enc_cfg, cfg)})


def init_pretrain_state(
    objective: ObjectiveConfig,
    encoder_cfg: EncoderConfig,
    schedule: Optional[ScheduleConfig] = None,
    seed: int = 0,
) -> PretrainState:
    if encoder_cfg.mode is not objective.required_mode:
        raise ConfigError(f"{objective.objective.value} requiere modo {objective.required_mode.value}, el encoder usa {encoder_cfg.mode.value}")
    schedule = schedule or ScheduleConfig(**objective.schedule_defaults())
    torch.manual_seed(seed)
    encoder = ViTEncoder(encoder_cfg)
    heads = build_heads(encoder_cfg, objective)
    state = PretrainState(
        objective=objective,
        schedule=schedule,
        encoder=encoder,
        heads=heads,
        optimizer=build_optimizer({"encoder": encoder, **dict(heads.items())}, schedule),
        seed=seed,
    )
    if objective.uses_teacher:
        state.ema = EMAState.from_student(state.student(), objective.ema_momentum, objective.ema_schedule, schedule.total_steps)
    if objective.objective is Objective.DINO:
        state.dino = DinoHeadState(
            n_prototypes=objective.n_prototypes,
            student_temp=objective.student_temp,
            teacher_temp=objective.teacher_temp,
            center_momentum=objective.center_momentum,
        )
    logger.debug("estado de preentrenamiento %s listo (seed=%d)", objective.objective.value, seed)
    return state


@dataclass
class StepPlan:
    step: int
    lr: float
    wd: float
    mask: Optional[MaskSpec] = None
    crops: List[CropBox] = field(default_factory=list)
    teacher_temp: Optional[float] = None


@dataclass
class LossOutput:
    loss: torch.Tensor
    diagnostics: Dict[str, float] = field(default_factory=dict)
    teacher_scores: List[torch.Tensor] = field(default_factory=list)


def as_batch_tensor(batch: Union[torch.Tensor, Sequence[TactileWindow]], enc_cfg: EncoderConfig) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch
    if not batch:
        raise ConfigError("lote vacío")
    return torch.stack([window_to_tensor(resize_for_encoder(w, enc_cfg.img_size)) for w in batch])


def plan_step(state: PretrainState, batch: torch.Tensor, rng: Optional[np.random.Generator] = None) -> StepPlan:
    """Muestrea todo lo aleatorio del paso a partir de (seed, step)."""
    rng = rng if rng is not None else rng_for(state.seed, state.step, STREAM_PLAN)
    cfg, enc_cfg = state.objective, state.encoder.cfg
    plan = StepPlan(step=state.step, lr=lr_at(state.step, state.schedule), wd=wd_at(state.step, state.schedule))
    grid = state.encoder.grid_for(batch)
    kind = cfg.objective
    if kind is Objective.MAE:
        plan.mask = sample_random_mask(int(np.prod(grid)), cfg.mask_ratio, rng)
    elif kind is Objective.IJEPA:
        plan.mask = sample_block_mask(grid, cfg.n_targets, cfg.target_scale, cfg.target_aspect, rng, cfg.context_scale)
    elif kind is Objective.VJEPA:
        plan.mask = sample_tube_mask(grid, cfg.tube_ratio, cfg.target_aspect, rng, cfg.tube_blocks)
    else:
        plan.crops = sample_crops(int(batch.shape[-1]), enc_cfg.patch_size, cfg, rng)
        plan.teacher_temp = teacher_temp_at(
            state.step, cfg.teacher_temp, cfg.teacher_temp_warmup_from, cfg.teacher_temp_warmup_steps
        )
    return plan


def _mae_loss(state: PretrainState, batch: torch.Tensor, plan: StepPlan) -> LossOutput:
    mask, cfg = plan.mask, state.objective
    emb = state.encoder(batch, keep_idx=mask.visible())
    recon = state.heads["decoder"](emb.tokens, mask, emb.grid_shape)
    target = patchify(batch, state.encoder.cfg)
    loss = mae_loss(recon, target, mask, norm_pix=cfg.norm_pix)
    with torch.no_grad():
        idx = mask.masked().to(batch.device)
        tgt, pred = target[:, idx], recon[:, idx]
        if cfg.norm_pix:
            pred = pred * (tgt.var(dim=-1, keepdim=True) + 1e-6) ** 0.5 + tgt.mean(dim=-1, keepdim=True)
        masked_psnr = psnr(pred, tgt)
    return LossOutput(loss, {"masked_psnr": masked_psnr})


def _jepa_loss(state: PretrainState, batch: torch.Tensor, plan: StepPlan) -> LossOutput:
    mask = plan.mask
    teacher = state.ema.teacher["encoder"]
    with torch.no_grad():
        full = teacher(batch).tokens
        targets = F.layer_norm(full, full.shape[-1:])
    ctx = state.encoder(batch, keep_idx=mask.visible())
    groups = mask.blocks if state.kind is Objective.IJEPA else [mask.masked_idx]
    predictor = state.heads["predictor"]
    preds = [predictor_forward(ctx.tokens, g, predictor, mask.visible_idx, ctx.grid_shape) for g in groups]
    tgts = [targets[:, torch.from_numpy(g).to(batch.device)] for g in groups]
    loss = jepa_loss(preds, tgts)
    with torch.no_grad():
        diag = {
            "latent_var": float(ctx.tokens.var(dim=(0, 1)).mean()),
            "target_var": float(targets.var(dim=(0, 1)).mean()),
        }
    return LossOutput(loss, diag)


def _dino_loss(state: PretrainState, batch: torch.Tensor, plan: StepPlan) -> LossOutput:
    views = crop_views(batch, plan.crops)
    head = state.heads["dino_head"]
    student_scores = [head(summary_token(state.encoder(v))) for v in views]
    teacher = state.ema.teacher
    n_global = sum(1 for c in plan.crops if c.is_global)
    with torch.no_grad():
        teacher_scores = [teacher["dino_head"](summary_token(teacher["encoder"](v))) for v in views[:n_global]]
    loss = dino_loss(student_scores, teacher_scores, state.dino, plan.teacher_temp, update=False)
    with torch.no_grad():
        probs = teacher_probs(torch.cat(teacher_scores), state.dino, plan.teacher_temp)
        report = detect_collapse(probs, state.dino.center)
    diag = {
        "teacher_entropy": report.mean_entropy,
        "teacher_diversity": report.diversity,
        "center_norm": report.center_norm,
        "collapsed": float(report.collapsed),
    }
    return LossOutput(loss, diag, teacher_scores)


def compute_loss(state: PretrainState, batch: torch.Tensor, plan: StepPlan) -> LossOutput:
    """Pérdida del objetivo dado un plan ya muestreado; no modifica el estado."""
    if state.kind is Objective.MAE:
        return _mae_loss(state, batch, plan)
    if state.kind is Objective.DINO:
        return _dino_loss(state, batch, plan)
    return _jepa_loss(state, batch, plan)


def pretrain_step(
    state: PretrainState,
    batch: Union[torch.Tensor, Sequence[TactileWindow]],
    rng: Optional[np.random.Generator] = None,
    plan: Optional[StepPlan] = None,
) -> Tuple[PretrainState, float, Dict[str, float]]:
    """Un paso de optimización: plan, pérdida, backward, clip, AdamW, EMA y centro DINO."""
    batch = as_batch_tensor(batch, state.encoder.cfg)
    plan = plan or plan_step(state, batch, rng)
    lr, wd = apply_schedule(state.optimizer, state.step, state.schedule)
    state.train(True)
    out = compute_loss(state, batch, plan)
    value = float(out.loss.detach())
    if not math.isfinite(value):
        raise NumericalAbort(
            f"pérdida no finita en el paso {state.step}",
            dump={"step": state.step, "objective": state.kind.value, "lr": lr, "wd": wd, **out.diagnostics},
        )
    state.optimizer.zero_grad(set_to_none=True)
    out.loss.backward()
    params = trainable(p for m in state.modules().values() for p in m.parameters())
    grad_norm = float(torch.nn.utils.clip_grad_norm_(params, state.schedule.grad_clip))
    state.optimizer.step()
    if state.ema is not None:
        ema_update(state.student(), state.ema, state.step)
    if state.dino is not None and state.objective.centering:
        update_center(state.dino, out.teacher_scores)
    state.step += 1
    diagnostics = {"lr": lr, "wd": wd, "grad_norm": grad_norm, **out.diagnostics}
    return state, value, diagnostics
