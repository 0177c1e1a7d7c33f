"""splat4d: instance-aware 4D Gaussian splatting on synthetic dynamic scenes.

Two-stage pipeline: (1) perceive which tracked instances actually move by
warping per-frame reconstructions forward in time and scoring the
inconsistency, (2) reconstruct the full dynamic scene with vibrating,
life-limited Gaussians whose identity embeddings and dynamics regularize each
other. Includes a scripted ray-traced data generator, an editor and a CLI.
"""

from .backend import BACKEND
from .scene import (
    Camera,
    FrameObservation,
    Gaussian4D,
    GaussianField,
    TrackEntry,
    TrackSequence,
    instant_velocity,
    load_field,
    opacity_at,
    position_at,
    save_field,
    staticness,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Camera",
    "FrameObservation",
    "Gaussian4D",
    "GaussianField",
    "TrackEntry",
    "TrackSequence",
    "instant_velocity",
    "load_field",
    "opacity_at",
    "position_at",
    "save_field",
    "staticness",
    "__version__",
]
