"""Dynamic occupancy grid mapping for automotive radar with ambiguity-aware sensor models."""

from .config import EngineConfig, load_config
from .core import Detection, DetectionArrays, EgoPose, GridSpec, SensorModelParams, SensorMount, default_mounts
from .grid_manager import UnifyState

__all__ = ["Detection", "DetectionArrays", "EgoPose", "EngineConfig", "GridSpec", "SensorModelParams",
           "SensorMount", "UnifyState", "default_mounts", "load_config"]
