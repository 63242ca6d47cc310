"""Exact-likelihood normalizing flows on product spaces of SO(3).

Rotation algebra (:mod:`so3flow.so3`), reverse-mode autodiff
(:mod:`so3flow.autodiff`), SO(3) flow layers (:mod:`so3flow.layers`), the
autoregressive product flow (:mod:`so3flow.flow`), forward kinematics
(:mod:`so3flow.kinematics`), exact synthetic priors
(:mod:`so3flow.synthetic`), training (:mod:`so3flow.training`), evaluation
metrics (:mod:`so3flow.metrics`), and an sklearn-style estimator
(:mod:`so3flow.estimator`).
"""

from .flow import FlowConfig, ProductSO3Flow, load_checkpoint, save_checkpoint
from .estimator import SO3ProductFlowDensity
from .kinematics import Skeleton, default_skeleton, forward_kinematics
from .synthetic import PoseDataset, SyntheticPriorSpec, generate, oracle_log_prob
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FlowConfig",
    "ProductSO3Flow",
    "SO3ProductFlowDensity",
    "Skeleton",
    "default_skeleton",
    "forward_kinematics",
    "PoseDataset",
    "SyntheticPriorSpec",
    "generate",
    "oracle_log_prob",
    "TrainConfig",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
