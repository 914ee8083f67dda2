"""Parametric internal hand-bone model toolkit.

A differentiable per-bone-rigid forward model (shape space, keypoint
regressor, linear blend skinning), coarse-to-fine registration onto
annotated scans, bone-aware parameter training, evaluation metrics, and a
synthetic ground-truth generator that stands in for scan data.
"""

from .model import (
    BoneModel,
    BoneTemplate,
    JointRegressor,
    PoseParams,
    ShapeBasis,
    ShapeParams,
    forward,
    jacobians,
)
from .registration import AnnotatedScan, RegistrationConfig, register_scan
from .synth import SynthSpec, sample_dataset
from .training import TrainingConfig, train_model

__all__ = [
    "BoneModel",
    "BoneTemplate",
    "JointRegressor",
    "PoseParams",
    "ShapeBasis",
    "ShapeParams",
    "forward",
    "jacobians",
    "AnnotatedScan",
    "RegistrationConfig",
    "register_scan",
    "SynthSpec",
    "sample_dataset",
    "TrainingConfig",
    "train_model",
]

__version__ = "0.1.0"
