"""Differentiable within-class covariance normalization for numpy networks.

Subpackages at a glance:

``linalg``    Cholesky, SPD inverse, Jacobi eigensolver, PCA
``diffops``   reverse-mode rules for the matrix ops and finite-difference checks
``layer``     the batch-statistics projection layer and its moving average
``nn``        layers, shape inference and the :class:`Network` container
``train``     stratified batching, Adam, k-fold training, calibration, checkpoints
``analysis``  eigen-spectra, k-NN curves, class-wise f1, PCA export
``data``      synthetic shift benchmark and dataset I/O
``cli``       the ``dwcca`` command
"""
__version__ = "0.1.0"

from .config import ModelConfig, dense_model_config, load_model_config
from .data import LabeledBatch, ShiftSpec, make_shifted_gaussians
from .layer import DwccaConfig, ProjectionState
from .nn import Network, build_model
from .train import TrainConfig, cross_validate, train_fold

__all__ = [
    "DwccaConfig",
    "LabeledBatch",
    "ModelConfig",
    "Network",
    "ProjectionState",
    "ShiftSpec",
    "TrainConfig",
    "build_model",
    "cross_validate",
    "dense_model_config",
    "load_model_config",
    "make_shifted_gaussians",
    "train_fold",
]
