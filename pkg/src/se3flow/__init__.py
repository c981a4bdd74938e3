"""Dense per-pixel SE(3) motion fields from RGB-D pairs.

The solver treats every pixel as its own rigid-motion unknown and couples
neighbouring pixels through embedding affinities inside a weighted
Gauss-Newton step, so rigid regions agree without ever being segmented.
"""

from . import bilap, camera, dense_se3, fieldops, fileio, kernels, metrics, se3, synth, viz
from .se3 import Se3

__version__ = "0.1.0"

__all__ = [
    "Se3",
    "bilap",
    "camera",
    "dense_se3",
    "fieldops",
    "fileio",
    "kernels",
    "metrics",
    "se3",
    "synth",
    "viz",
    "__version__",
]
