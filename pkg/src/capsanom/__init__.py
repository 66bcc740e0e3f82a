"""Capsule-network anomaly detection on imbalanced MNIST-style data.

A self-contained stack: a float64 autodiff tensor core, the capsule
encoder/decoder with routing by agreement, the imbalanced binary dataset
protocol, three baseline detectors, a minority-class F1 / AUROC evaluation
harness, and a CLI that ties them together.
"""

__version__ = "0.1.0"

from capsanom.capsnet import (
    CapsNetModel,
    DecoderConfig,
    EncoderConfig,
    LossParams,
    encoder_forward,
    predict,
    train,
)
from capsanom.dataset import (
    ImbalancedDatasetSpec,
    LabeledDataset,
    build_all_splits,
    build_imbalanced_subset,
    export_dataset,
    import_dataset,
    load_corpus,
    load_mnist,
    stratified_validation_split,
    synthetic_corpus,
)
from capsanom.metrics import EvalReport, confusion, evaluate, prf1, roc_auc
from capsanom.tensor import Tensor

__all__ = [
    "CapsNetModel",
    "DecoderConfig",
    "EncoderConfig",
    "EvalReport",
    "ImbalancedDatasetSpec",
    "LabeledDataset",
    "LossParams",
    "Tensor",
    "build_all_splits",
    "build_imbalanced_subset",
    "confusion",
    "encoder_forward",
    "evaluate",
    "export_dataset",
    "import_dataset",
    "load_corpus",
    "load_mnist",
    "predict",
    "prf1",
    "roc_auc",
    "stratified_validation_split",
    "synthetic_corpus",
    "train",
]
