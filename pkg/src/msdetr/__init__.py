"""Multi-scale deformable detection transformer at desk scale."""

from .config import RunConfig, load_config
from .estimator import MSDETRDetector
from .model import ModelConfig, build, fuse_model

__version__ = "0.1.0"

__all__ = ["MSDETRDetector", "ModelConfig", "RunConfig", "build", "fuse_model", "load_config"]
