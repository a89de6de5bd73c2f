"""Modular deformable 3D registration: blocks, designs, variants, losses,
metrics, synthetic data, and a seeded experiment harness."""

__version__ = "0.1.0"

from .core import (
    ConfigError,
    DisplacementField,
    FeatureMap,
    LabelMap,
    ShapeError,
    Volume,
)

__all__ = [
    "ConfigError",
    "DisplacementField",
    "FeatureMap",
    "LabelMap",
    "ShapeError",
    "Volume",
    "__version__",
]
