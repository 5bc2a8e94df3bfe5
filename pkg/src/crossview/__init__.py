"""Cross-view (BEV + FPV) multimodal trajectory prediction with shared 3D
goal queries, trained and evaluated on synthetic vectorized driving scenes.
"""

__version__ = "0.1.0"

from .geometry import AbsoluteFrame, CameraModel
from .model import CrossViewModel, ModelConfig
from .scene import GenConfig, Sample, generate_synthetic_scene, load_dataset, save_dataset
from .training import TrainConfig, run_training

__all__ = [
    "AbsoluteFrame",
    "CameraModel",
    "CrossViewModel",
    "ModelConfig",
    "GenConfig",
    "Sample",
    "generate_synthetic_scene",
    "load_dataset",
    "save_dataset",
    "TrainConfig",
    "run_training",
]
