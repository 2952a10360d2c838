"""Federated transfer learning simulator for digital-twin CT analysis."""

__version__ = "0.1.0"

from .data import Dataset, Sample, SynthConfig, generate_synthetic, load_csv, partition_dirichlet
from .estimators import ClusteredFederatedClassifier, FedAvgClassifier, FederatedTransferClassifier
from .metrics import ConfusionMatrix, ConvergenceSettings, confusion_matrix, detect_convergence, report
from .model import ModelSpec, ParameterVector, TrainSettings, fine_tune, forward, pretrain_base
from .protocol import HospitalNode, run_cfl, run_fedavg, run_ftl

__all__ = [
    "ClusteredFederatedClassifier",
    "ConfusionMatrix",
    "ConvergenceSettings",
    "Dataset",
    "FedAvgClassifier",
    "FederatedTransferClassifier",
    "HospitalNode",
    "ModelSpec",
    "ParameterVector",
    "Sample",
    "SynthConfig",
    "TrainSettings",
    "confusion_matrix",
    "detect_convergence",
    "fine_tune",
    "forward",
    "generate_synthetic",
    "load_csv",
    "partition_dirichlet",
    "pretrain_base",
    "report",
    "run_cfl",
    "run_fedavg",
    "run_ftl",
]
