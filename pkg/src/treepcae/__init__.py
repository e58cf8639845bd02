"""Tree-structured graph-convolution point-cloud autoencoder toolkit.

A self-contained implementation: a small reverse-mode autodiff engine, mesh
parsing and area-uniform surface sampling, the tree encoder/decoder network,
Chamfer and Frechet metrics, an Adam trainer with augmentation and completion
modes, latent-space analysis helpers, and a CLI (`treepcae`).
"""

from .analysis import (EmbeddingRecord, LinearSvmModel, classification_accuracy,
                       classify, export_embeddings, interpolate, read_embeddings,
                       train_linear_svm)
from .meshio import (DEFAULT_SAMPLE_COUNT, Mesh, PointCloud, normalize, parse_obj,
                     parse_off, read_cloud, sample_surface, synth_cloud,
                     synth_dataset, write_cloud)
from .metrics import (DEFAULT_TRUNCATION_COUNT, GaussianStats, chamfer, chamfer_loss,
                      coordinate_moments, fpd, frechet_distance, gaussian_stats,
                      truncated_chamfer)
from .model import (Checkpoint, ModelConfig, TreeAutoencoder, default_model_config,
                    load_checkpoint, save_checkpoint)
from .tensor import Tape, Tensor, finite_diff_check
from .trainer import (REGIMES, OptimizerState, TrainConfig, TrainResult, adam_step,
                      make_partial, rotation_augment, train)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "DEFAULT_SAMPLE_COUNT", "DEFAULT_TRUNCATION_COUNT",
    "EmbeddingRecord", "GaussianStats", "LinearSvmModel", "Mesh", "ModelConfig",
    "OptimizerState", "PointCloud", "REGIMES", "Tape", "Tensor", "TrainConfig",
    "TrainResult", "TreeAutoencoder", "adam_step", "chamfer", "chamfer_loss",
    "classification_accuracy", "classify", "coordinate_moments",
    "default_model_config", "export_embeddings", "finite_diff_check", "fpd",
    "frechet_distance", "gaussian_stats", "interpolate", "load_checkpoint",
    "make_partial", "normalize", "parse_obj", "parse_off", "read_cloud",
    "read_embeddings", "rotation_augment", "sample_surface", "save_checkpoint",
    "synth_cloud", "synth_dataset", "train", "train_linear_svm",
    "truncated_chamfer", "write_cloud",
]
