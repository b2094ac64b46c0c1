"""Stable dynamical systems on spheres and product manifolds, learned from demonstrations."""
from .errors import (
    ChartOverflowError,
    CutLocusError,
    DataError,
    DegeneratePullbackError,
    InjectivityRadiusError,
    ManifoldError,
    NumericalError,
    RSDSError,
    TrainingError,
    ValidationError,
)
from .manifold import ManifoldSpec, euclidean, product, sphere
from .model import BaselineModel, RSDSModel, TrainConfig, rollout, train
from .odeint import IntegrationConfig

__all__ = [
    "BaselineModel",
    "ChartOverflowError",
    "CutLocusError",
    "DataError",
    "DegeneratePullbackError",
    "InjectivityRadiusError",
    "IntegrationConfig",
    "ManifoldError",
    "ManifoldSpec",
    "NumericalError",
    "RSDSError",
    "RSDSModel",
    "TrainConfig",
    "TrainingError",
    "ValidationError",
    "euclidean",
    "product",
    "rollout",
    "sphere",
    "train",
]
