from __future__ import annotations

from typing import Any, Dict, Optional


class TacrepError(Exception):
    """Error base del paquete; `exit_code` es el código que devuelve la CLI."""

    exit_code = 1


class ConfigError(TacrepError, ValueError):
    """Configuración o precondición inválida (código de salida 2)."""

    exit_code = 2


class ManifestError(ConfigError):
    """Manifiesto ilegible, referencias colgantes o timestamps desalineados."""


class NumericalAbort(TacrepError, FloatingPointError):
    """Pérdida o parámetros no finitos. `dump` guarda el diagnóstico del paso."""

    exit_code = 3

    def __init__(self, message: str, dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.dump: Dict[str, Any] = dict(dump or {})


class FreezeViolation(AssertionError):
    """Un gradiente alcanzó parámetros del encoder congelado."""
