"""Desk-scale bullet-time studio: image-based radiance-field rendering with
silhouette-guided sampling, trajectory design, and trajectory-aware
refinement, verified against an analytic scene oracle.

Submodules import numpy lazily relative to the CLI so thread pinning can
happen first; import the pieces you need directly, e.g.
``from bullettime import renderer, scene``.
"""

__version__ = "0.1.0"

__all__ = [
    "camera", "cli", "config", "metrics", "nn", "optim", "renderer",
    "sampling", "scene", "service", "sfs", "tensor", "training",
    "trajectory",
]


def __getattr__(name):
    if name in __all__:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
