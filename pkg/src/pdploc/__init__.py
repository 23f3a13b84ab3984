"""Transformer-based indoor localization from distributed power delay profiles.

Submodules are imported lazily so the command line can pin BLAS thread
environment variables before numpy loads.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "compression",
    "dataio",
    "tokenizer",
    "model",
    "augment",
    "train",
    "evaluation",
    "cli",
)

__all__ = list(_SUBMODULES)


def __getattr__(name: str):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
