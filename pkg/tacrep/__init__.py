"""tacrep: representaciones táctiles autosupervisadas y benchmark TacBench.

Corpus sintéticos, encoder ViT, objetivos SSL (MAE, DINO, I-JEPA, V-JEPA),
probes atentivos, campos de fuerza y orquestación desde la CLI `tacrep`.
"""

from .cli import main  # re-export for convenience

__all__ = ["main"]

__version__ = "0.1.0"
