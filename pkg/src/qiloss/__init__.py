"""Quasi-isometric regularisation of depth-aware descriptors.

Audits for the (K, B, epsilon) corridor between object depths and their
descriptors, the corresponding contrastive loss with analytic gradients, a
pseudo-geodesic check of the local-to-global argument, and a small numpy
trainer for toy experiments.
"""
from .geodesic import GeodesicPath, TheoremReport, build_path, pseudo_geodesic, verify_theorem
from .losses import LossOutput, ObjectAnnotation, avg_pool_5x5, extract_descriptors, obj_depth_loss, qi_loss, total_loss
from .metric_core import minkowski_dist, pairwise_matrix, validate_metric_axioms
from .quasi_iso import (
    DescriptorSet,
    QiParams,
    ViolationReport,
    check_global_qi,
    check_local_qi,
    epsilon_neighborhood,
    find_violating_pairs,
    violation_ratio,
)
from .synth import SynthConfig, generate
from .trainer import MetricsLog, TrainConfig, sweep_epsilon, sweep_lambda, train

__version__ = "0.1.0"

__all__ = [
    "DescriptorSet",
    "GeodesicPath",
    "LossOutput",
    "MetricsLog",
    "ObjectAnnotation",
    "QiParams",
    "SynthConfig",
    "TheoremReport",
    "TrainConfig",
    "ViolationReport",
    "avg_pool_5x5",
    "build_path",
    "check_global_qi",
    "check_local_qi",
    "epsilon_neighborhood",
    "extract_descriptors",
    "find_violating_pairs",
    "generate",
    "minkowski_dist",
    "obj_depth_loss",
    "pairwise_matrix",
    "pseudo_geodesic",
    "qi_loss",
    "sweep_epsilon",
    "sweep_lambda",
    "total_loss",
    "train",
    "validate_metric_axioms",
    "verify_theorem",
    "violation_ratio",
]
