from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence, Type, TypeVar

import numpy as np
import torch

from .errors import ConfigError

E = TypeVar("E", bound=Enum)


def now_iso() -> str:
    """Devuelve la hora actual en UTC en formato ISO 8601."""
    return datetime.now(timezone.utc).isoformat()


def parse_enum(kind: Type[E], value: Any) -> E:
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{kind.__name__}: valor desconocido {value!r} (opciones: {[m.value for m in kind]})") from None


def to_jsonable(obj: Any) -> Any:
    """Convierte dataclasses, enums, rutas y arrays a tipos JSON nativos."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: to_jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(obj: Any, length: int = 12) -> str:
    """Hash SHA-256 de la forma canónica; no depende del orden de claves ni de espacios."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:length]


def code_hash(root: Path | None = None, length: int = 12) -> str:
    """Hash de contenido de las fuentes del paquete (estilo git: ruta + bytes)."""
    root = root or Path(__file__).resolve().parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode("utf-8"))
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()[:length]


def set_determinism(seed: int, deterministic: bool = False) -> None:
    """Siembra random/numpy/torch; con `deterministic` fuerza kernels deterministas."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generador derivado de (seed, *keys); independiente del estado global."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Media móvil causal de `window` muestras (las primeras usan las disponibles)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr
    csum = np.cumsum(np.insert(arr, 0, 0.0))
    out = np.empty_like(arr)
    for i in range(arr.size):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def chunked(items: Sequence[Any], size: int) -> Iterable[Sequence[Any]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]
