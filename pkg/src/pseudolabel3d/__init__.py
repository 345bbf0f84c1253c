"""Pseudo instance / semantic labels for 3D scenes from multi-view 2D cues."""

from .config import PipelineConfig, load_config
from .manifest import SceneBundle, load_scene, save_scene
from .pipeline import PipelineResult, run_pipeline
from .scene import IGNORE, UNASSIGNED, CameraFrame, SceneCloud

__version__ = "0.1.0"

__all__ = [
    "CameraFrame",
    "IGNORE",
    "PipelineConfig",
    "PipelineResult",
    "SceneBundle",
    "SceneCloud",
    "UNASSIGNED",
    "load_config",
    "load_scene",
    "run_pipeline",
    "save_scene",
]
