"""Exportadores de filas y eventos: CSV de métricas, resultados de benchmark y JSON Lines."""

from __future__ import annotations

import csv
import fcntl
import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence

from .errors import ConfigError
from .metrics import RESULT_COLUMNS
from .utils import to_jsonable

logger = logging.getLogger(__name__)


class RowExporter(Protocol):
    """Contrato mínimo para componentes que consumen filas de un experimento."""

    def emit(self, row: dict) -> None:  # pragma: no cover - interfaz
        ...

    def close(self) -> None:  # pragma: no cover - interfaz
        ...


def _ensure_parent(path: Path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)


def read_header(path: Path) -> Optional[List[str]]:
    if not path.exists() or path.stat().st_size == 0:
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), None)


class CsvExporter:
    """CSV en modo append con cabecera fija.

    Las columnas se fijan con la primera fila si no se dan; si el fichero ya
    existe, su cabecera debe coincidir.
    """

    def __init__(self, path: Path, columns: Optional[Sequence[str]] = None):
        self.path = Path(path)
        _ensure_parent(self.path)
        existing = read_header(self.path)
        if existing is not None and columns is not None and list(columns) != existing:
            raise ConfigError(f"{self.path}: cabecera {existing} distinta de {list(columns)}")
        self.columns: Optional[List[str]] = existing or (list(columns) if columns else None)
        self._fh = open(self.path, "a", newline="", buffering=1, encoding="utf-8")
        self._writer: Optional[csv.DictWriter] = None
        self.rows = 0
        if existing is not None:
            self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore")

    def emit(self, row: dict) -> None:
        if self._writer is None:
            self.columns = self.columns or list(row)
            self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore")
            self._writer.writeheader()
        self._writer.writerow({k: row.get(k, "") for k in self.columns})
        self.rows += 1

    def close(self) -> None:
        try:
            self._fh.close()
        except OSError:
            pass


class BenchResultsExporter:
    """`bench_results.csv` compartido entre procesos; cada fila se añade bajo `flock` exclusivo."""

    def __init__(self, path: Path):
        self.path = Path(path)
        _ensure_parent(self.path)

    def emit(self, row: dict) -> None:
        with open(self.path, "a+", newline="", encoding="utf-8") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                fh.seek(0, os.SEEK_END)
                writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
                if fh.tell() == 0:
                    writer.writeheader()
                writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    def close(self) -> None:
        pass


class JsonlExporter:
    """Exporta eventos a un fichero JSON Lines."""

    def __init__(self, path: Path):
        self.path = Path(path)
        _ensure_parent(self.path)
        self._fh = open(self.path, "a", buffering=1, encoding="utf-8")

    def emit(self, row: dict) -> None:
        self._fh.write(json.dumps(to_jsonable(row), ensure_ascii=False, sort_keys=True) + "\n")

    def close(self) -> None:
        try:
            self._fh.close()
        except OSError:
            pass


def read_jsonl(path: Path) -> List[Dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


class MultiExporter:
    """Agrupa múltiples exportadores y los trata como uno solo."""

    def __init__(self, exporters: Iterable[RowExporter]):
        self._exporters = list(exporters)

    def emit(self, row: dict) -> None:
        for exporter in self._exporters:
            exporter.emit(row)

    def close(self) -> None:
        for exporter in self._exporters:
            exporter.close()


def _number(text: str) -> Optional[float]:
    try:
        return float(text)
    except (TypeError, ValueError):
        return None


class MetricsTail:
    """Lector incremental de un CSV en crecimiento (p. ej. `metrics.csv`).

    Solo consume líneas completas. Si el fichero encoge (reanudación que lo
    recorta) vuelve a leerlo desde el principio y marca `reset`.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        self.offset = 0
        self.columns: Optional[List[str]] = None
        self.reset = False
        self._inode: Optional[int] = None

    def poll(self) -> List[Dict[str, Optional[float]]]:
        self.reset = False
        if not self.path.exists():
            return []
        stat = self.path.stat()
        if stat.st_size < self.offset or (self._inode is not None and stat.st_ino != self._inode):
            logger.info("%s recortado: se relee desde el inicio", self.path)
            self.offset, self.columns, self.reset = 0, None, True
        self._inode = stat.st_ino
        with open(self.path, "rb") as fh:
            fh.seek(self.offset)
            chunk = fh.read()
        end = chunk.rfind(b"\n")
        if end < 0:
            return []
        self.offset += end + 1
        lines = chunk[: end + 1].decode("utf-8").splitlines()
        if self.columns is None and lines:
            self.columns = next(csv.reader([lines[0]]))
            lines = lines[1:]
        rows = []
        for values in csv.reader(lines):
            if values:
                rows.append({k: _number(v) for k, v in zip(self.columns, values)})
        return rows
