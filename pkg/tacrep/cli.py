from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .errors import ConfigError, NumericalAbort, TacrepError

logger = logging.getLogger("tacrep")


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=verbose)],
        force=True,
    )


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", type=Path, default=None, help="Fichero JSON de configuración.")
    p.add_argument("--seed", type=int, default=None, help="Semilla (sustituye a la lista `seeds`).")
    p.add_argument("--deterministic", action="store_true", default=None, help="Algoritmos deterministas de torch, un hilo.")
    p.add_argument("--out", type=Path, default=None, required=out_required, help="Directorio de salida.")
    p.add_argument("-v", "--verbose", action="store_true", help="Log en nivel DEBUG.")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tacrep", description="Representaciones táctiles autosupervisadas y benchmark TacBench")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="Genera un corpus sintético (PNG + CSV + manifest.json).")
    _common(s, out_required=True)
    s.add_argument("--sensor-type", type=str, default=None, help="DIGIT, GelSight2017 o GelSightMini.")
    s.add_argument("--sequences", type=int, default=None, help="Número de secuencias.")
    s.add_argument("--frames", type=int, default=None, help="Frames por secuencia.")

    s = sub.add_parser("validate-manifest", help="Comprueba un manifiesto y lista los problemas.")
    _common(s)
    s.add_argument("manifest", type=Path)

    s = sub.add_parser("pretrain", help="Preentrenamiento SSL con checkpoints y metrics.csv.")
    _common(s)
    s.add_argument("--data", action="append", default=None, help="Manifiesto (repetible).")
    s.add_argument("--objective", type=str, default=None, help="MAE, DINO, IJEPA o VJEPA.")
    s.add_argument("--encoder", type=str, default=None, help="Preset: tiny, small, base.")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--no-resume", action="store_true", help="Ignora checkpoints previos en --out.")

    s = sub.add_parser("probe-train", help="Entrena un probe de TacBench sobre un encoder.")
    _common(s)
    s.add_argument("--task", required=True, help="T1..T5")
    s.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint del encoder (omitido con --e2e).")
    s.add_argument("--tuning", default="frozen", choices=["frozen", "partial", "full"])
    s.add_argument("--budget", type=float, default=1.0)
    s.add_argument("--data", action="append", default=None)
    s.add_argument("--e2e", action="store_true", help="Baseline: encoder aleatorio, todo entrenable.")

    s = sub.add_parser("evaluate", help="Evalúa un probe y añade la fila a bench_results.csv.")
    _common(s)
    s.add_argument("--probe", type=Path, required=True)
    s.add_argument("--data", action="append", default=None, help="Por defecto, el split de test de los datos de entrenamiento.")
    s.add_argument("--results", type=Path, default=None, help="Ruta de bench_results.csv.")

    s = sub.add_parser("sweep", help="Barrido tareas × presupuestos × ajustes × semillas.")
    _common(s)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", action="append", default=None)

    s = sub.add_parser("visualize-field", help="Campos normal y de cizalla en PNG + .raw/.hdr.")
    _common(s)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", action="append", default=None)
    s.add_argument("--windows", type=int, default=4)
    s.add_argument("--stride", type=int, default=8, help="Separación de flechas en píxeles.")

    s = sub.add_parser("report", help="Resumen, gráficos y mejora SSL frente a E2E.")
    _common(s)
    s.add_argument("results", type=Path)

    s = sub.add_parser("watch", help="Monitor en vivo de un directorio de ejecución.")
    _common(s)
    s.add_argument("run_dir", type=Path, nargs="?", default=None, help="Por defecto, --out o el out_dir de --config.")
    s.add_argument("--interval", type=float, default=1.0, help="Segundos entre lecturas.")
    return p


def _settings(args: argparse.Namespace, **extra):
    """Configuración de la ejecución con los flags comunes aplicados; siembra los RNG globales."""
    from .config import load_experiment
    from .utils import set_determinism

    overrides = dict(extra)
    overrides["seeds"] = [args.seed] if args.seed is not None else None
    overrides["deterministic"] = args.deterministic
    overrides["out_dir"] = str(args.out) if args.out is not None else None
    cfg = load_experiment(args.config, **overrides)
    set_determinism(cfg.seed, cfg.deterministic)
    return cfg


def _experiment(args: argparse.Namespace, **extra):
    cfg = _settings(args, **extra)
    problems = cfg.check_files()
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def cmd_synth_gen(args: argparse.Namespace) -> int:
    from .config import load_synth_config
    from .synth import synth_generate

    cfg = load_synth_config(args.config, seed=args.seed, sensor_type=args.sensor_type, n_sequences=args.sequences, frames_per_sequence=args.frames)
    manifest, _ = synth_generate(cfg, args.out)
    logger.info("%d secuencias %s en %s", len(manifest.sequences), cfg.sensor_type.value, args.out)
    return 0


def cmd_validate_manifest(args: argparse.Namespace, console: Optional[Console] = None) -> int:
    from .data import load_manifest, validate_manifest
    from .utils import to_jsonable

    _settings(args)
    manifest = load_manifest(args.manifest, validate=False)
    problems = validate_manifest(manifest)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        payload = {"manifest": str(args.manifest), "sequences": len(manifest.sequences), "problems": problems}
        (args.out / "manifest_problems.json").write_text(json.dumps(to_jsonable(payload), indent=2, ensure_ascii=False), encoding="utf-8")
    console = console or Console()
    if not problems:
        console.print(f"[green]{args.manifest}: {len(manifest.sequences)} secuencias, sin problemas[/green]")
        return 0
    table = Table(title=f"Problemas en {args.manifest}")
    table.add_column("#", justify="right")
    table.add_column("problema", style="red")
    for i, problem in enumerate(problems, 1):
        table.add_row(str(i), problem)
    console.print(table)
    return ConfigError.exit_code


def cmd_pretrain(args: argparse.Namespace) -> int:
    from .harness import pretrain

    cfg = _experiment(args, data=args.data, objective=args.objective, encoder=args.encoder, steps=args.steps)
    result = pretrain(cfg, progress=True, resume=not args.no_resume)
    logger.info("último checkpoint: %s", result.checkpoints[-1] if result.checkpoints else "—")
    return 0


def cmd_probe_train(args: argparse.Namespace) -> int:
    import torch

    from .encoder import ViTEncoder
    from .harness import encoder_from_checkpoint, load_bank, run_probe, save_probe
    from .tasks import Tuning, get_task

    cfg = _experiment(args, data=args.data)
    if args.e2e:
        torch.manual_seed(cfg.seed)
        encoder, tuning, name = ViTEncoder(cfg.encoder_config()), Tuning.FULL, "e2e"
    elif args.checkpoint is None:
        raise ConfigError("probe-train necesita --checkpoint (o --e2e)")
    else:
        encoder, tuning, name = encoder_from_checkpoint(args.checkpoint), Tuning(args.tuning), "ssl"
    bank = load_bank(cfg.data, encoder.cfg)
    trained, report = run_probe(args.task, encoder, bank, cfg, tuning, args.budget, cfg.seed, name, progress=True)
    task = get_task(args.task).task.value
    path = save_probe(trained, cfg.out_path / f"probe_{task}_{name}_{tuning.value}_{args.budget:g}_s{cfg.seed}.pt", cfg.data, cfg.test_fraction)
    logger.info("probe guardado en %s (%s = %.4g en test)", path, report.metric, report.value)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .exporters import BenchResultsExporter
    from .harness import evaluate_saved, load_probe

    saved = load_probe(args.probe)
    report = evaluate_saved(saved, args.data)
    results = args.results or (args.out or args.probe.parent) / "bench_results.csv"
    BenchResultsExporter(results).emit(report.as_row())
    logger.info("%s %s = %.4g [%.4g, %.4g] (n=%d) → %s", report.task, report.metric, report.value, report.ci_lo, report.ci_hi, report.n_eval, results)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from .harness import sweep

    cfg = _experiment(args, data=args.data)
    summary = sweep(cfg, args.checkpoint, progress=True)
    if summary.failed:
        logger.warning("%d celdas fallidas: ver %s", summary.failed, cfg.out_path / "sweep_failures.jsonl")
    return 0


def cmd_visualize_field(args: argparse.Namespace) -> int:
    from .harness import visualize_fields

    cfg = _experiment(args, data=args.data)
    written = visualize_fields(cfg, args.checkpoint, n_windows=args.windows, stride=args.stride, progress=True)
    logger.info("%d ficheros escritos", len(written))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .report import report

    _settings(args)
    result = report(args.results, args.out or args.results.parent)
    logger.info("resumen en %s", result.summary_path)
    return 0


def cmd_watch(args: argparse.Namespace) -> int:
    from .app import RunMonitorApp

    cfg = _settings(args)
    run_dir = args.run_dir or (cfg.out_path if args.out is not None or args.config is not None else None)
    if run_dir is None:
        raise ConfigError("watch necesita un directorio de ejecución (posicional, --out o --config)")
    if not run_dir.is_dir():
        raise ConfigError(f"no existe el directorio {run_dir}")
    RunMonitorApp(run_dir=run_dir, interval=args.interval).run()
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "validate-manifest": cmd_validate_manifest,
    "pretrain": cmd_pretrain,
    "probe-train": cmd_probe_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "visualize-field": cmd_visualize_field,
    "report": cmd_report,
    "watch": cmd_watch,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(getattr(args, "verbose", False))
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        logger.error("abortado por valores no finitos: %s", exc)
        if exc.dump:
            logger.debug("diagnóstico: %s", json.dumps(exc.dump, default=str, sort_keys=True))
        return exc.exit_code
    except TacrepError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
