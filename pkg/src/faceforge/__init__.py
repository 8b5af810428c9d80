"""Inverse face rendering with a morphable model and training-data synthesis."""
from .camera import Illumination, Pose, default_pose
from .model import InvalidArgument, Mesh, MorphableModel, generate_synthetic_model
from .params import FaceParams

__version__ = "0.1.0"

__all__ = ["FaceParams", "Illumination", "InvalidArgument", "Mesh", "MorphableModel", "Pose",
           "default_pose", "generate_synthetic_model"]
