"""Entrenamiento y evaluación de probes TacBench sobre encoders congelados o ajustados.

El modo `frozen` calcula los tokens del encoder una sola vez (sin gradiente) y
entrena solo el pooler atentivo y las cabezas; `partial` ajusta además el último
bloque transformer y `full` todo el encoder.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from rich.progress import track

from .encoder import ViTEncoder
from .errors import ConfigError, FreezeViolation
from .heads import AttentiveProbeConfig, AttentivePooler, MLPHead
from .metrics import BOOTSTRAP_RESAMPLES, MetricReport, bootstrap_ci
from .tasks import DEFAULT_FMAX_N, HISTORY_OFFSET, TaskContext, TaskSpec, Targets, Tuning, get_task, select_rows, stratify_values
from .utils import chunked, parse_enum, rng_for
from .windows import WindowBank

logger = logging.getLogger(__name__)

STREAM_BUDGET = 11
STREAM_SPLIT = 12
STREAM_EPOCH = 13
STREAM_BOOTSTRAP = 14
STREAM_SHOT = 15


@dataclass
class ProbeConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    val_fraction: float = 0.1
    class_weighting: bool = False
    probe_heads: Optional[int] = None
    probe_depth: int = 1
    adapt_epochs: int = 50
    bootstrap: int = BOOTSTRAP_RESAMPLES
    fmax: Tuple[float, float, float] = DEFAULT_FMAX_N
    history_offset: int = HISTORY_OFFSET

    def __post_init__(self):
        self.fmax = tuple(self.fmax)
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr > 0, epochs >= 1 y batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction debe estar en [0,1)")
        if self.patience < 1 or self.adapt_epochs < 1:
            raise ConfigError("patience y adapt_epochs deben ser >= 1")

    def context(self) -> TaskContext:
        return TaskContext(fmax=self.fmax)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ProbeConfig":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"claves desconocidas en ProbeConfig: {sorted(unknown)}")
        return cls(**raw)


class ProbeModel(nn.Module):
    """Pooler atentivo compartido + una MLP por cabeza de la tarea."""

    def __init__(self, spec: TaskSpec, embed_dim: int, n_heads: int, depth: int = 1):
        super().__init__()
        self.history = spec.history
        self.pooler = AttentivePooler(AttentiveProbeConfig(embed_dim=embed_dim, n_heads=n_heads, depth=depth))
        in_dim = embed_dim * (2 if spec.history else 1)
        hidden = max(embed_dim // 4, 1)
        self.heads = nn.ModuleDict({h.name: MLPHead(in_dim, h.out_dim, hidden=hidden) for h in spec.heads})

    def forward(self, tokens: torch.Tensor, history: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        z = self.pooler(tokens)
        if self.history:
            if history is None:
                raise ConfigError("la tarea necesita la ventana de historia")
            z = torch.cat([self.pooler(history), z], dim=-1)
        return {name: head(z) for name, head in self.heads.items()}


def set_tuning(encoder: ViTEncoder, tuning: Tuning) -> List[nn.Parameter]:
    """Activa requires_grad según el modo y devuelve los parámetros entrenables del encoder."""
    tuning = parse_enum(Tuning, tuning)
    encoder.requires_grad_(tuning is Tuning.FULL)
    if tuning is Tuning.PARTIAL:
        encoder.blocks[-1].requires_grad_(True)
    return [p for p in encoder.parameters() if p.requires_grad]


def assert_frozen(encoder: nn.Module) -> None:
    for name, p in encoder.named_parameters():
        if p.grad is not None and bool(torch.any(p.grad != 0)):
            raise FreezeViolation(f"gradiente en el encoder congelado: {name}")


def budget_indices(n: int, fraction: float, seed: int, strata: Optional[np.ndarray] = None) -> np.ndarray:
    """Prefijo de una permutación sembrada por estrato: los presupuestos pequeños son subconjuntos de los grandes."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"budget debe estar en (0,1], recibido {fraction}")
    if n == 0:
        raise ConfigError("no hay ejemplos etiquetados")
    if fraction == 1.0:
        return np.arange(n)
    keys = np.zeros(n, dtype=np.int64) if strata is None else np.asarray(strata)
    kept: List[int] = []
    for rank, key in enumerate(np.unique(keys)):
        members = np.flatnonzero(keys == key)
        perm = rng_for(seed, STREAM_BUDGET, rank).permutation(members.size)
        kept.extend(members[perm[: int(math.floor(fraction * members.size + 0.5))]].tolist())
    if not kept:
        raise ConfigError(f"el presupuesto {fraction} deja el conjunto vacío")
    return np.sort(np.asarray(kept, dtype=np.int64))


def split_by_sequence(bank: WindowBank, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Índices (train, test) con secuencias disjuntas."""
    n_seq = len(bank.sequence_ids)
    n_test = max(1, int(round(test_fraction * n_seq)))
    if n_test >= n_seq:
        raise ConfigError(f"hacen falta al menos 2 secuencias para separar train/test (hay {n_seq})")
    test_pos = set(rng_for(seed, STREAM_SPLIT).permutation(n_seq)[:n_test].tolist())
    is_test = np.array([pos in test_pos for pos, _ in bank.index], dtype=bool)
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def check_disjoint(train: WindowBank, held_out: WindowBank, what: str) -> None:
    """Error si ambos bancos comparten alguna secuencia (los ids son únicos dentro de un banco)."""
    shared = train.sequence_set() & held_out.sequence_set()
    if shared:
        raise ConfigError(f"{what} comparten {len(shared)} secuencias: {sorted(shared)[:5]}")


def window_batch(bank: WindowBank, idx: Sequence[int], side: int) -> torch.Tensor:
    x = bank.stack(idx)
    if x.shape[-1] == side and x.shape[-2] == side:
        return x
    lead = x.shape[:-3]
    y = F.interpolate(x.reshape(-1, *x.shape[-3:]), size=(side, side), mode="bilinear", align_corners=False)
    return y.reshape(*lead, *y.shape[-3:])


class FeatureSource:
    """Tokens del encoder por índice de ventana, opcionalmente cacheados."""

    def __init__(self, bank: WindowBank, encoder: ViTEncoder, cached: bool, chunk: int = 64):
        self.bank = bank
        self.encoder = encoder
        self.cached = cached
        self.chunk = chunk
        self._cache: Dict[int, torch.Tensor] = {}

    @torch.no_grad()
    def precompute(self, indices: Sequence[int]) -> None:
        missing = sorted({int(i) for i in indices} - set(self._cache))
        was_training = self.encoder.training
        self.encoder.eval()
        for part in chunked(missing, self.chunk):
            tokens = self.encoder(window_batch(self.bank, part, self.encoder.cfg.img_size)).tokens
            for i, tok in zip(part, tokens):
                self._cache[i] = tok
        self.encoder.train(was_training)

    def tokens(self, idx: Sequence[int]) -> torch.Tensor:
        if self.cached:
            self.precompute(idx)
            return torch.stack([self._cache[int(i)] for i in idx])
        return self.encoder(window_batch(self.bank, idx, self.encoder.cfg.img_size)).tokens


@dataclass
class TrainedProbe:
    spec: TaskSpec
    tuning: Tuning
    encoder: ViTEncoder
    model: ProbeModel
    config: ProbeConfig
    budget: float = 1.0
    seed: int = 0
    n_train: int = 0
    n_val: int = 0
    model_name: str = "ssl"
    history: List[Dict[str, float]] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.encoder.parameters()) + sum(p.numel() for p in self.model.parameters())


def _class_weights(spec: TaskSpec, targets: Targets, idx: np.ndarray) -> Dict[str, torch.Tensor]:
    out: Dict[str, torch.Tensor] = {}
    for head in spec.heads:
        if head.loss != "ce":
            continue
        counts = np.bincount(targets[head.name][idx], minlength=head.out_dim).astype(np.float64)
        present = counts > 0
        w = np.zeros(head.out_dim)
        w[present] = counts.sum() / (present.sum() * counts[present])
        out[head.name] = torch.tensor(w, dtype=torch.float32)
    return out


def task_loss(
    spec: TaskSpec,
    outputs: Dict[str, torch.Tensor],
    targets: Dict[str, torch.Tensor],
    weights: Optional[Dict[str, torch.Tensor]] = None,
) -> torch.Tensor:
    """Suma de pérdidas por cabeza: L1 para regresión, entropía cruzada para clasificación."""
    total = 0.0
    for head in spec.heads:
        out, tgt = outputs[head.name], targets[head.name]
        if head.loss == "l1":
            total = total + F.l1_loss(out, tgt.to(out.dtype))
        else:
            w = (weights or {}).get(head.name)
            total = total + F.cross_entropy(out, tgt, weight=None if w is None else w.to(out))
    return total


def _torch_targets(targets: Targets, idx: Sequence[int]) -> Dict[str, torch.Tensor]:
    rows = select_rows(targets, idx)
    return {k: torch.from_numpy(v).long() if v.dtype.kind in "iu" else torch.from_numpy(v).float() for k, v in rows.items()}


def _forward(model: ProbeModel, features: FeatureSource, idx: np.ndarray, history_map: Optional[np.ndarray]) -> Dict[str, torch.Tensor]:
    tokens = features.tokens(idx)
    history = features.tokens(history_map[idx]) if history_map is not None else None
    return model(tokens, history)


def _fit(
    trained: TrainedProbe,
    features: FeatureSource,
    targets: Targets,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    params: List[nn.Parameter],
    epochs: int,
    history_map: Optional[np.ndarray],
    progress: bool = False,
) -> None:
    cfg, spec, model, encoder = trained.config, trained.spec, trained.model, trained.encoder
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.95), weight_decay=cfg.weight_decay)
    weights = _class_weights(spec, targets, train_idx) if cfg.class_weighting else None
    rng = rng_for(trained.seed, STREAM_EPOCH)
    tuned = trained.tuning is not Tuning.FROZEN
    best, best_state, wait = math.inf, None, 0
    for epoch in track(range(epochs), description=f"probe {spec.task.value}", disable=not progress):
        model.train()
        encoder.train(tuned)
        running = []
        for part in chunked(rng.permutation(train_idx), cfg.batch_size):
            part = np.asarray(part)
            loss = task_loss(spec, _forward(model, features, part, history_map), _torch_targets(targets, part), weights)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if not tuned:
                assert_frozen(encoder)
            optimizer.step()
            running.append(float(loss.detach()))
        record = {"epoch": float(epoch), "train_loss": float(np.mean(running))}
        if val_idx.size:
            model.eval()
            encoder.eval()
            with torch.no_grad():
                record["val_loss"] = float(
                    task_loss(spec, _forward(model, features, val_idx, history_map), _torch_targets(targets, val_idx), weights)
                )
        trained.history.append(record)
        monitored = record.get("val_loss", record["train_loss"])
        if monitored < best:
            best, wait = monitored, 0
            best_state = copy.deepcopy((model.state_dict(), encoder.state_dict() if tuned else None))
        else:
            wait += 1
            if val_idx.size and wait >= cfg.patience:
                logger.debug("parada temprana en la época %d (mejor val %.4f)", epoch, best)
                break
    if best_state is not None:
        model.load_state_dict(best_state[0])
        if best_state[1] is not None:
            encoder.load_state_dict(best_state[1])
    model.eval()
    encoder.eval()


def _history_map(spec: TaskSpec, bank: WindowBank, cfg: ProbeConfig) -> Optional[np.ndarray]:
    return np.asarray(bank.with_offset(cfg.history_offset), dtype=np.int64) if spec.history else None


def train_probe(
    task: Any,
    encoder: ViTEncoder,
    tuning: Any,
    data: WindowBank,
    budget: float = 1.0,
    seed: int = 0,
    cfg: Optional[ProbeConfig] = None,
    progress: bool = False,
    model_name: str = "ssl",
) -> TrainedProbe:
    """Entrena las cabezas de `task` sobre una fracción `budget` de `data`.

    En modo `frozen` el encoder recibido no se modifica; en `partial` y `full`
    se entrena una copia, que queda en `TrainedProbe.encoder`.
    """
    spec, tuning, cfg = get_task(task), parse_enum(Tuning, tuning), cfg or ProbeConfig()
    spec.check_labels(data.labels)
    targets = spec.build_targets(data.labels, cfg.context())
    idx = budget_indices(len(data), budget, seed, stratify_values(spec, targets))
    perm = rng_for(seed, STREAM_SPLIT).permutation(idx)
    n_val = int(round(cfg.val_fraction * perm.size))
    if perm.size - n_val < 1:
        n_val = 0
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])

    torch.manual_seed(seed)
    if tuning is Tuning.FROZEN:
        flags = [p.requires_grad for p in encoder.parameters()]
        encoder.requires_grad_(False)
        encoder_params: List[nn.Parameter] = []
    else:
        encoder = copy.deepcopy(encoder)
        encoder_params = set_tuning(encoder, tuning)
    model = ProbeModel(spec, encoder.cfg.embed_dim, cfg.probe_heads or encoder.cfg.n_heads, cfg.probe_depth)
    trained = TrainedProbe(spec, tuning, encoder, model, cfg, budget=budget, seed=seed, n_train=int(train_idx.size), n_val=int(val_idx.size), model_name=model_name)
    features = FeatureSource(data, encoder, cached=tuning is Tuning.FROZEN)
    try:
        _fit(trained, features, targets, train_idx, val_idx, list(model.parameters()) + encoder_params, cfg.epochs, _history_map(spec, data, cfg), progress)
    finally:
        if tuning is Tuning.FROZEN:
            for p, flag in zip(encoder.parameters(), flags):
                p.requires_grad_(flag)
    logger.info("%s/%s budget=%.2f: %d ventanas de entrenamiento, %d épocas", spec.task.value, tuning.value, budget, train_idx.size, len(trained.history))
    return trained


@torch.no_grad()
def predict(trained: TrainedProbe, data: WindowBank, indices: Optional[Sequence[int]] = None) -> Dict[str, np.ndarray]:
    idx = np.arange(len(data)) if indices is None else np.asarray(indices, dtype=np.int64)
    trained.model.eval()
    trained.encoder.eval()
    features = FeatureSource(data, trained.encoder, cached=True)
    history_map = _history_map(trained.spec, data, trained.config)
    parts: List[Dict[str, torch.Tensor]] = []
    for part in chunked(idx, trained.config.batch_size):
        parts.append(_forward(trained.model, features, np.asarray(part), history_map))
    return {k: torch.cat([p[k] for p in parts]).double().numpy() for k in parts[0]}


def evaluate(
    trained: TrainedProbe,
    data: WindowBank,
    indices: Optional[Sequence[int]] = None,
    seed: int = 0,
    n_resamples: Optional[int] = None,
) -> MetricReport:
    """Métrica de la tarea sobre datos de evaluación, con IC 95 % por bootstrap."""
    spec = trained.spec
    idx = np.arange(len(data)) if indices is None else np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ConfigError("conjunto de evaluación vacío")
    labels = [data.labels[i] for i in idx]
    spec.check_labels(labels)
    ctx = trained.config.context()
    targets = spec.build_targets(labels, ctx)
    outputs = predict(trained, data, idx)

    def score(sel: np.ndarray) -> float:
        return spec.score({k: v[sel] for k, v in outputs.items()}, select_rows(targets, sel), ctx)

    value, lo, hi = bootstrap_ci(score, idx.size, rng_for(seed, STREAM_BOOTSTRAP), n_resamples or trained.config.bootstrap)
    return MetricReport(
        task=spec.task.value,
        metric=spec.metric,
        value=value,
        ci_lo=lo,
        ci_hi=hi,
        budget=trained.budget,
        n_eval=int(idx.size),
        model=trained.model_name,
        tuning=trained.tuning.value,
        seed=trained.seed,
    )


def n_shot_adapt(
    trained: TrainedProbe,
    support: WindowBank,
    n: int,
    query: WindowBank,
    seed: int = 0,
) -> Tuple[TrainedProbe, MetricReport]:
    """n=0 evalúa tal cual; n>0 ajusta solo las cabezas con n ejemplos por clase del soporte."""
    if n < 0:
        raise ConfigError("n debe ser >= 0")
    if n == 0:
        return trained, evaluate(trained, query, seed=seed)
    spec = trained.spec
    if spec.class_key is None:
        raise ConfigError(f"{spec.task.value} no es de clasificación: n-shot requiere clases")
    check_disjoint(support, query, "soporte y consulta")
    ctx = trained.config.context()
    spec.check_labels(support.labels)
    support_classes = spec.build_targets(support.labels, ctx)[spec.class_key]
    query_classes = spec.build_targets(query.labels, ctx)[spec.class_key]
    rng = rng_for(seed, STREAM_SHOT, n)
    chosen: List[int] = []
    for c in np.unique(query_classes):
        members = np.flatnonzero(support_classes == c)
        if members.size == 0:
            raise ConfigError(f"la clase {int(c)} no aparece en el soporte")
        if members.size < n:
            logger.warning("clase %d: solo %d ejemplos de soporte (< %d)", int(c), members.size, n)
        chosen.extend(rng.permutation(members)[:n].tolist())
    adapted = TrainedProbe(
        spec=spec,
        tuning=Tuning.FROZEN,
        encoder=trained.encoder,
        model=copy.deepcopy(trained.model),
        config=trained.config,
        budget=trained.budget,
        seed=seed,
        n_train=len(chosen),
        model_name=f"{trained.model_name}-{n}shot",
    )
    targets = spec.build_targets(support.labels, ctx)
    flags = [p.requires_grad for p in adapted.encoder.parameters()]
    adapted.encoder.requires_grad_(False)
    try:
        _fit(
            adapted,
            FeatureSource(support, adapted.encoder, cached=True),
            targets,
            np.sort(np.asarray(chosen, dtype=np.int64)),
            np.zeros(0, dtype=np.int64),
            list(adapted.model.parameters()),
            trained.config.adapt_epochs,
            _history_map(spec, support, trained.config),
        )
    finally:
        for p, flag in zip(adapted.encoder.parameters(), flags):
            p.requires_grad_(flag)
    return adapted, evaluate(adapted, query, seed=seed)
