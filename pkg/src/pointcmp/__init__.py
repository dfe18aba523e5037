"""Contrastive mask prediction for self-supervised learning on point cloud videos."""

from .config import ConfigError, RunConfig
from .data import (DatasetError, PointCloudVideo, SyntheticSpec, generate_synthetic_dataset, read_dataset,
                   write_dataset)
from .encoder import EncoderConfig, PointEncoder
from .model import PointCMP
from .train import (Checkpoint, finetune, linear_probe, pretrain, run_ablation_suite, similarity_histogram,
                    export_embeddings)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "DatasetError", "EncoderConfig", "PointCMP", "PointCloudVideo", "PointEncoder",
    "RunConfig", "SyntheticSpec", "export_embeddings", "finetune", "generate_synthetic_dataset", "linear_probe",
    "pretrain", "read_dataset", "run_ablation_suite", "similarity_histogram", "write_dataset",
]
