"""Quality-aware tile classification for hyperspectral image segmentation.

Submodules:
  cube       hyperspectral cube type, SAM/L2 distances, HSC1/LBL1 file formats
  tiling     SLIC-style superpixel tiling and patch extraction
  quality    tile quality metrics, filtering, loss weights
  autodiff   reverse-mode automatic differentiation engine
  cnn        patch encoder/classifier and patch augmentation
  graph      kNN tile graphs, GAT classifier, graph augmentation
  training   regimes, splits, optimizers, training loops
  evaluate   metrics, ROC AUC, overlay rendering
  synth      synthetic phantom generator
  report     metric tables and figures
  pipeline   end-to-end experiment orchestration
  cli        command-line interface

Submodules are imported lazily so the CLI can configure threading before
numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = frozenset(
    {
        "autodiff",
        "checkpoint",
        "cli",
        "cnn",
        "cube",
        "errors",
        "evaluate",
        "graph",
        "pipeline",
        "quality",
        "report",
        "synth",
        "tiling",
        "training",
    }
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | _SUBMODULES)
