"""Orquestación de experimentos: preentrenamiento, monitor de reconstrucción, probes, barridos y campos."""

from __future__ import annotations

import itertools
import json
import logging
import os
import pickle
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from rich.progress import track

from .config import ExperimentConfig
from .data import load_manifest
from .encoder import (
    EncoderConfig,
    TokenMode,
    ViTEncoder,
    feature_taps,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .errors import ConfigError, NumericalAbort
from .exporters import BenchResultsExporter, CsvExporter, JsonlExporter, MultiExporter, read_jsonl
from .fields import predict_fields, save_raw_field, train_field_heads
from .heads import DPTConfig, DPTDecoder, dpt_decode
from .losses import psnr
from .metrics import MetricReport
from .objectives import PretrainState, init_pretrain_state, pretrain_step
from .probe import ProbeConfig, ProbeModel, TrainedProbe, check_disjoint, evaluate, split_by_sequence, train_probe
from .render import render_field, save_rendering
from .tasks import Tuning, get_task
from .utils import code_hash, now_iso, parse_enum, rng_for, set_determinism, to_jsonable
from .windows import WindowBank, WindowMode

logger = logging.getLogger(__name__)

STREAM_BATCH = 2
STREAM_VAL = 3
MONITOR_WINDOWS = 32
VAL_FRACTION = 0.1
FIELD_WINDOWS = 4


# ---------------------------------------------------------------------------
# Registro de ejecución

@dataclass
class RunLedger:
    """Procedencia de una ejecución y lista de artefactos emitidos (rutas relativas a `root`)."""

    root: Path
    run_id: str
    config_hash: str
    code_hash: str
    command: str
    started: str = field(default_factory=now_iso)
    ended: Optional[str] = None
    status: str = "running"
    artifacts: List[str] = field(default_factory=list)

    FILENAME = "ledger.json"

    @classmethod
    def start(cls, root: Path, cfg: ExperimentConfig, command: str) -> "RunLedger":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ledger = cls(root=root, run_id=uuid.uuid4().hex[:12], config_hash=cfg.hash(), code_hash=code_hash(), command=command)
        (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        ledger.add(root / "config.json")
        ledger.save()
        return ledger

    def add(self, path: Path) -> None:
        rel = os.path.relpath(Path(path), self.root)
        if rel not in self.artifacts:
            self.artifacts.append(rel)

    def finish(self, status: str = "ok") -> None:
        self.status = status
        self.ended = now_iso()
        self.save()

    def save(self) -> Path:
        path = self.root / self.FILENAME
        raw = asdict(self)
        raw["root"] = str(self.root)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(raw, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)
        return path

    def missing(self) -> List[str]:
        return [a for a in self.artifacts if not (self.root / a).exists()]

    @classmethod
    def load(cls, root: Path) -> "RunLedger":
        raw = json.loads((Path(root) / cls.FILENAME).read_text(encoding="utf-8"))
        raw["root"] = Path(raw["root"])
        return cls(**raw)


# ---------------------------------------------------------------------------
# Datos

def window_mode(enc_cfg: EncoderConfig) -> WindowMode:
    return WindowMode.CLIP if enc_cfg.mode is TokenMode.CLIP else WindowMode.PAIR


def load_bank(paths: Sequence[str], enc_cfg: EncoderConfig, stride: int = 5) -> WindowBank:
    if not paths:
        raise ConfigError("no se indicó ningún manifiesto de datos")
    manifests = [load_manifest(Path(p)) for p in paths]
    return WindowBank.from_source(manifests, mode=window_mode(enc_cfg), stride=stride, side=enc_cfg.img_size)


# ---------------------------------------------------------------------------
# Monitor de reconstrucción

def reconstruction_target(batch: torch.Tensor) -> torch.Tensor:
    """Pares: los 6 canales; clips: el frame ancla."""
    return batch[:, 0] if batch.dim() == 5 else batch


class ReconstructionProbe(nn.Module):
    """Decoder DPT que reconstruye la ventana a partir de rasgos del encoder sin gradiente."""

    def __init__(self, enc_cfg: EncoderConfig, features: int = 32):
        super().__init__()
        self.decoder = DPTDecoder(DPTConfig(embed_dim=enc_cfg.embed_dim, features=features, out_channels=enc_cfg.in_chans))
        self.taps = feature_taps(enc_cfg.depth)

    def forward(self, encoder: ViTEncoder, batch: torch.Tensor) -> torch.Tensor:
        was_training = encoder.training
        encoder.eval()
        with torch.no_grad():
            emb = encoder(batch, return_layers=self.taps)
        encoder.train(was_training)
        layers = [t.detach() for t in emb.layers]
        return torch.sigmoid(dpt_decode(layers, self.decoder, tuple(batch.shape[-2:]), emb.grid_shape))


@dataclass
class ReconstructionMonitor:
    probe: ReconstructionProbe
    optimizer: torch.optim.Optimizer
    series: List[Tuple[int, float]] = field(default_factory=list)

    @classmethod
    def build(cls, enc_cfg: EncoderConfig, lr: float = 1e-3, features: int = 32) -> "ReconstructionMonitor":
        probe = ReconstructionProbe(enc_cfg, features)
        return cls(probe=probe, optimizer=torch.optim.Adam(probe.parameters(), lr=lr))

    def train_step(self, encoder: ViTEncoder, batch: torch.Tensor) -> float:
        self.probe.train()
        loss = nn.functional.mse_loss(self.probe(encoder, batch), reconstruction_target(batch))
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())

    @torch.no_grad()
    def psnr(self, encoder: ViTEncoder, windows: torch.Tensor) -> float:
        self.probe.eval()
        return psnr(self.probe(encoder, windows), reconstruction_target(windows))


def monitor_reconstruction(
    encoder: ViTEncoder,
    monitor: ReconstructionMonitor,
    val_windows: torch.Tensor,
    train_windows: Optional[torch.Tensor] = None,
    steps: int = 1,
    step: Optional[int] = None,
) -> List[Tuple[int, float]]:
    """Entrena el probe `steps` veces (si hay lote de entrenamiento) y añade el PSNR de validación a la serie."""
    if train_windows is not None:
        for _ in range(steps):
            monitor.train_step(encoder, train_windows)
    value = monitor.psnr(encoder, val_windows)
    monitor.series.append((len(monitor.series) if step is None else step, value))
    return monitor.series


# ---------------------------------------------------------------------------
# Preentrenamiento

@dataclass
class PretrainResult:
    state: PretrainState
    checkpoints: List[Path]
    metrics_path: Path
    psnr: List[Tuple[int, float]]
    ledger: RunLedger


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"ckpt_{step:06d}.pt"


def latest_checkpoint(out_dir: Path) -> Optional[Path]:
    found = sorted((Path(out_dir) / "checkpoints").glob("ckpt_*.pt"))
    return found[-1] if found else None


def _save_state(state: PretrainState, monitor: ReconstructionMonitor, path: Path, cfg: ExperimentConfig) -> Path:
    aux: Dict[str, Any] = {"monitor_optimizer": monitor.optimizer.state_dict()}
    if state.dino is not None:
        aux["dino_center"] = state.dino.center.clone()
    return save_checkpoint(
        path,
        state.encoder,
        heads={**dict(state.heads.items()), "monitor": monitor.probe},
        optimizer=state.optimizer,
        ema={"teacher": state.ema.teacher} if state.ema is not None else None,
        step=state.step,
        extra={"objective": state.kind.value, "config_hash": cfg.hash(), "seed": state.seed},
        aux=aux,
    )


def _restore_state(state: PretrainState, monitor: ReconstructionMonitor, path: Path) -> None:
    ck = load_checkpoint(path)
    if ck.extra.get("objective") != state.kind.value:
        raise ConfigError(f"{path} es de {ck.extra.get('objective')}, se esperaba {state.kind.value}")
    state.encoder.load_state_dict(ck.encoder)
    for name, module in state.heads.items():
        module.load_state_dict(ck.heads[name])
    monitor.probe.load_state_dict(ck.heads["monitor"])
    state.optimizer.load_state_dict(ck.optimizer)
    monitor.optimizer.load_state_dict(ck.aux["monitor_optimizer"])
    if state.ema is not None:
        state.ema.teacher.load_state_dict(ck.ema["teacher"])
    if state.dino is not None:
        state.dino.center = ck.aux["dino_center"].clone()
    state.step = ck.step


def _truncate_metrics(path: Path, step: int) -> None:
    """Descarta filas de pasos >= `step` (quedan de una ejecución interrumpida tras el último checkpoint)."""
    if not path.exists() or path.stat().st_size == 0:
        return
    table = pd.read_csv(path)
    kept = table[table["step"] < step]
    if len(kept) != len(table):
        kept.to_csv(path, index=False)
        logger.info("metrics.csv recortado a %d filas (reanudación en el paso %d)", len(kept), step)


def pretrain(
    cfg: ExperimentConfig,
    bank: Optional[WindowBank] = None,
    progress: bool = False,
    resume: bool = True,
    halt_at: Optional[int] = None,
) -> PretrainResult:
    """Bucle de `pretrain_step` con checkpoints periódicos, metrics.csv y monitor PSNR.

    `halt_at` detiene el bucle antes de ese paso (simula una interrupción).
    Con `resume` continúa desde el último checkpoint de `cfg.out_dir`.
    """
    out = cfg.out_path
    seed = cfg.seed
    set_determinism(seed, cfg.deterministic)
    enc_cfg = cfg.encoder_config()
    bank = bank if bank is not None else load_bank(cfg.data, enc_cfg)
    if len(bank) < 2:
        raise ConfigError("hacen falta al menos 2 ventanas para preentrenar")
    perm = rng_for(seed, STREAM_VAL).permutation(len(bank))
    n_val = min(MONITOR_WINDOWS, max(1, int(round(VAL_FRACTION * len(bank)))))
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    val_windows = bank.stack(val_idx)

    state = init_pretrain_state(cfg.objective, enc_cfg, cfg.schedule_config(), seed=seed)
    monitor = ReconstructionMonitor.build(enc_cfg)
    ledger = RunLedger.start(out, cfg, command="pretrain")
    previous = latest_checkpoint(out) if resume else None
    metrics_path = out / "metrics.csv"
    if previous is not None:
        _restore_state(state, monitor, previous)
        _truncate_metrics(metrics_path, state.step)
        logger.info("reanudando %s desde el paso %d", state.kind.value, state.step)
    elif metrics_path.exists():
        metrics_path.unlink()
    checkpoints: List[Path] = [previous] if previous is not None else []
    metrics = CsvExporter(metrics_path)
    ledger.add(metrics_path)

    batch_size = min(state.schedule.batch_size, train_idx.size)
    stop = cfg.steps if halt_at is None else min(cfg.steps, halt_at)
    try:
        if cfg.steps == 0 and previous is None:
            checkpoints.append(_save_state(state, monitor, checkpoint_path(out, 0), cfg))
        for step in track(range(state.step, stop), description=f"pretrain {state.kind.value}", disable=not progress):
            pick = rng_for(seed, step, STREAM_BATCH).choice(train_idx.size, size=batch_size, replace=False)
            batch = bank.stack(train_idx[np.sort(pick)])
            try:
                state, loss, diag = pretrain_step(state, batch)
            except NumericalAbort as exc:
                path = _save_state(state, monitor, out / "checkpoints" / f"abort_{step:06d}.pt", cfg)
                dump = out / "abort_dump.json"
                dump.write_text(json.dumps({"error": str(exc), **exc.dump}, indent=2, sort_keys=True, default=str), encoding="utf-8")
                ledger.add(path)
                ledger.add(dump)
                ledger.finish("aborted")
                raise
            value: Any = ""
            if step % cfg.monitor_every == 0 or step == cfg.steps - 1:
                value = monitor_reconstruction(state.encoder, monitor, val_windows, batch, step=step)[-1][1]
            else:
                monitor.train_step(state.encoder, batch)
            metrics.emit({"step": step, "loss": loss, **diag, "psnr": value})
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                checkpoints.append(_save_state(state, monitor, checkpoint_path(out, state.step), cfg))
                ledger.add(checkpoints[-1])
                ledger.save()
    finally:
        metrics.close()
    for path in checkpoints:
        ledger.add(path)
    ledger.finish("ok" if state.step >= cfg.steps else "halted")
    logger.info("preentrenamiento %s: %d pasos, %d checkpoints", state.kind.value, state.step, len(checkpoints))
    return PretrainResult(state=state, checkpoints=checkpoints, metrics_path=metrics_path, psnr=monitor.series, ledger=ledger)


# ---------------------------------------------------------------------------
# Probes y baseline E2E

def encoder_from_checkpoint(path: Path) -> ViTEncoder:
    encoder = load_checkpoint(Path(path)).build_encoder()
    encoder.eval()
    return encoder


def run_probe(
    task: Any,
    encoder: ViTEncoder,
    bank: WindowBank,
    cfg: ExperimentConfig,
    tuning: Any = Tuning.FROZEN,
    budget: float = 1.0,
    seed: int = 0,
    model_name: str = "ssl",
    progress: bool = False,
) -> Tuple[TrainedProbe, MetricReport]:
    """Entrena sobre las secuencias de entrenamiento y evalúa en las de test (disjuntas)."""
    train_idx, test_idx = split_by_sequence(bank, cfg.test_fraction, seed)
    train_bank, test_bank = bank.subset(train_idx), bank.subset(test_idx)
    check_disjoint(train_bank, test_bank, "train y test")
    trained = train_probe(task, encoder, tuning, train_bank, budget, seed, cfg.probe, progress, model_name)
    report = evaluate(trained, test_bank, seed=seed)
    return trained, report


def e2e_baseline(
    task: Any,
    data: WindowBank,
    budget: float,
    seed: int,
    cfg: ExperimentConfig,
    progress: bool = False,
) -> MetricReport:
    """Misma arquitectura encoder + probe desde inicialización aleatoria, todo entrenable."""
    torch.manual_seed(seed)
    encoder = ViTEncoder(cfg.encoder_config())
    trained, report = run_probe(task, encoder, data, cfg, Tuning.FULL, budget, seed, "e2e", progress)
    logger.info("E2E %s budget=%.2f: %d parámetros", get_task(task).task.value, budget, trained.parameter_count())
    return report


PROBE_VERSION = 1


def save_probe(trained: TrainedProbe, path: Path, data: Sequence[str] = (), test_fraction: float = 0.2) -> Path:
    """Guarda encoder + cabezas del probe con lo necesario para reconstruir el split de test."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": PROBE_VERSION,
        "task": trained.spec.task.value,
        "tuning": trained.tuning.value,
        "budget": float(trained.budget),
        "seed": int(trained.seed),
        "model_name": trained.model_name,
        "n_train": int(trained.n_train),
        "n_val": int(trained.n_val),
        "probe_config": json.dumps(to_jsonable(trained.config), sort_keys=True),
        "encoder_config": json.dumps(trained.encoder.cfg.to_dict(), sort_keys=True),
        "encoder": trained.encoder.state_dict(),
        "model": trained.model.state_dict(),
        "data": json.dumps([str(p) for p in data]),
        "test_fraction": float(test_fraction),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


@dataclass
class SavedProbe:
    trained: TrainedProbe
    data: List[str]
    test_fraction: float


def load_probe(path: Path) -> SavedProbe:
    path = Path(path)
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigError(f"probe ilegible {path}: {exc}") from exc
    if raw.get("format_version") != PROBE_VERSION:
        raise ConfigError(f"{path}: format_version {raw.get('format_version')} no soportada")
    spec = get_task(raw["task"])
    cfg = ProbeConfig.from_dict(json.loads(raw["probe_config"]))
    encoder = ViTEncoder(EncoderConfig.from_dict(json.loads(raw["encoder_config"])))
    encoder.load_state_dict(raw["encoder"])
    model = ProbeModel(spec, encoder.cfg.embed_dim, cfg.probe_heads or encoder.cfg.n_heads, cfg.probe_depth)
    model.load_state_dict(raw["model"])
    encoder.requires_grad_(False)
    trained = TrainedProbe(
        spec,
        parse_enum(Tuning, raw["tuning"]),
        encoder,
        model,
        cfg,
        budget=raw["budget"],
        seed=raw["seed"],
        n_train=raw["n_train"],
        n_val=raw.get("n_val", 0),
        model_name=raw["model_name"],
    )
    return SavedProbe(trained=trained, data=json.loads(raw["data"]), test_fraction=raw["test_fraction"])


def evaluate_saved(saved: SavedProbe, data: Optional[Sequence[str]] = None, bank: Optional[WindowBank] = None) -> MetricReport:
    """Con los datos de entrenamiento evalúa las secuencias de test; con otros datos, todas las ventanas."""
    trained = saved.trained
    paths = [str(p) for p in (data or saved.data)]
    bank = bank if bank is not None else load_bank(paths, trained.encoder.cfg)
    indices = None
    if sorted(paths) == sorted(saved.data):
        _, indices = split_by_sequence(bank, saved.test_fraction, trained.seed)
    return evaluate(trained, bank, indices, seed=trained.seed)


# ---------------------------------------------------------------------------
# Barridos

@dataclass
class SweepCell:
    task: str
    model: str
    tuning: str
    budget: float
    seed: int

    def key(self, config_hash: str, checkpoint: str) -> str:
        return f"{config_hash}|{checkpoint}|{self.task}|{self.model}|{self.tuning}|{self.budget:.6g}|{self.seed}"


@dataclass
class SweepSummary:
    results_path: Path
    written: int = 0
    skipped: int = 0
    failed: int = 0


def sweep_cells(cfg: ExperimentConfig) -> List[SweepCell]:
    cells = [
        SweepCell(get_task(t).task.value, "ssl", Tuning(u).value, b, s)
        for t, b, u, s in itertools.product(cfg.tasks, cfg.budgets, cfg.tunings, cfg.seeds)
    ]
    if cfg.e2e:
        cells += [
            SweepCell(get_task(t).task.value, "e2e", Tuning.FULL.value, b, s)
            for t, b, s in itertools.product(cfg.tasks, cfg.budgets, cfg.seeds)
        ]
    return cells


def sweep(
    cfg: ExperimentConfig,
    checkpoint: Path,
    bank: Optional[WindowBank] = None,
    progress: bool = False,
) -> SweepSummary:
    """Producto cartesiano tareas × presupuestos × ajustes × semillas (+ E2E).

    Cada celda queda en `sweep_state.jsonl` con estado `ok` o `failed`; al
    repetir se saltan las `ok`. Las excepciones de una celda se copian también
    a `sweep_failures.jsonl` y el barrido continúa.
    """
    out = cfg.out_path
    encoder = encoder_from_checkpoint(checkpoint)
    if encoder.cfg.to_dict() != cfg.encoder_config().to_dict():
        logger.warning("la configuración del encoder del checkpoint difiere de la del experimento; se usa la del checkpoint")
        cfg.encoder_overrides = encoder.cfg.to_dict()
    bank = bank if bank is not None else load_bank(cfg.data, encoder.cfg)
    ledger = RunLedger.start(out, cfg, command="sweep")
    state_path, failures_path = out / "sweep_state.jsonl", out / "sweep_failures.jsonl"
    results = BenchResultsExporter(out / "bench_results.csv")
    done = {row["key"] for row in read_jsonl(state_path) if row.get("status") == "ok"}
    chash, ckpt_id = ledger.config_hash, Path(checkpoint).name
    summary = SweepSummary(results_path=results.path)
    state_log, failure_log = JsonlExporter(state_path), JsonlExporter(failures_path)
    outcomes = MultiExporter([state_log, failure_log])
    try:
        for cell in track(sweep_cells(cfg), description="sweep", disable=not progress):
            key = cell.key(chash, ckpt_id)
            if key in done:
                summary.skipped += 1
                continue
            try:
                if cell.model == "e2e":
                    report = e2e_baseline(cell.task, bank, cell.budget, cell.seed, cfg)
                else:
                    _, report = run_probe(cell.task, encoder, bank, cfg, cell.tuning, cell.budget, cell.seed)
            except Exception as exc:
                logger.exception("celda %s falló", key)
                outcomes.emit({"key": key, "status": "failed", **asdict(cell), "error": repr(exc), "time": now_iso()})
                summary.failed += 1
                continue
            results.emit(report.as_row())
            state_log.emit({"key": key, "status": "ok", **asdict(cell), "config_hash": chash, "code_hash": ledger.code_hash, "checkpoint": str(checkpoint), "time": now_iso()})
            done.add(key)
            summary.written += 1
    finally:
        outcomes.close()
    for path in (results.path, state_path, failures_path):
        ledger.add(path)
    ledger.finish("ok" if summary.failed == 0 else "partial")
    logger.info("sweep: %d filas nuevas, %d saltadas, %d fallidas", summary.written, summary.skipped, summary.failed)
    return summary


# ---------------------------------------------------------------------------
# Campos de fuerza

def visualize_fields(
    cfg: ExperimentConfig,
    checkpoint: Path,
    bank: Optional[WindowBank] = None,
    n_windows: int = FIELD_WINDOWS,
    stride: int = 8,
    progress: bool = False,
) -> List[Path]:
    """Entrena las cabezas de campo sobre el encoder congelado y escribe PNG + .raw/.hdr."""
    out = cfg.out_path
    encoder = encoder_from_checkpoint(checkpoint)
    if encoder.cfg.mode is not TokenMode.IMAGE6:
        raise ConfigError("los campos de fuerza requieren un encoder de pares (IMAGE6)")
    bank = bank if bank is not None else load_bank(cfg.data, encoder.cfg, stride=5)
    ledger = RunLedger.start(out, cfg, command="visualize-field")
    pairs = bank.stack(np.arange(len(bank)))
    heads = train_field_heads(encoder, pairs, cfg.field_viz, seed=cfg.seed, progress=progress)
    chosen = np.linspace(0, len(bank) - 1, num=min(n_windows, len(bank))).round().astype(int)
    written: List[Path] = []
    for i, pair in zip(chosen, predict_fields(encoder, heads, pairs[chosen])):
        stem = out / "fields" / f"window_{int(i):06d}"
        written.append(save_rendering(render_field(pair, stride=stride), stem.with_suffix(".png")))
        written.extend(save_raw_field(stem.with_name(stem.name + "_normal"), pair.normal_field, "normal"))
        written.extend(save_raw_field(stem.with_name(stem.name + "_shear"), pair.shear_field, "shear"))
    for path in written:
        ledger.add(path)
    ledger.finish()
    logger.info("campos: %d ventanas renderizadas en %s (%d parámetros de cabeza)", len(chosen), out / "fields", sum(parameter_count(m) for m in heads.modules().values()))
    return written
