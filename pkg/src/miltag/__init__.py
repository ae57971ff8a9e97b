"""Multi-instance learning toolkit for weakly-labelled audio tagging.

Bags of instance vectors carry clip-level tags; the models here span
the classic MIL assumptions (max / mean / bag distance / embeddings)
and learned attention pooling at the decision and feature level, all on
a small reverse-mode autodiff core with no framework dependencies.
"""

from .data import (Bag, BagDataset, SynthSpec, dataset_stats, generate_synthetic,
                   load_quality_file, make_bag, read_dataset, subsample_balanced,
                   write_dataset)
from .errors import (ConfigError, DomainError, EmptyBagError, FormatError, MiltagError,
                     NumericError, ShapeError)
from .metrics import (EvalReport, average_precision, d_prime, evaluate, pearson,
                      roc_auc, score_bags, write_report_csv, write_report_json)
from .models import (ATTENTION_HEADS, HEADS, TOPOLOGIES, Model, ModelSpec, forward,
                     knn_predict, load_model, predict, save_model)
from .numerics.rng import Rng
from .training import TrainConfig, TrainResult, ensemble_predict, prepare_bags, train

__version__ = "0.1.0"

__all__ = [
    "ATTENTION_HEADS", "Bag", "BagDataset", "ConfigError", "DomainError",
    "EmptyBagError", "EvalReport", "FormatError", "HEADS", "MiltagError", "Model",
    "ModelSpec", "NumericError", "Rng", "ShapeError", "SynthSpec", "TOPOLOGIES",
    "TrainConfig", "TrainResult", "average_precision", "d_prime", "dataset_stats",
    "ensemble_predict", "evaluate", "forward", "generate_synthetic", "knn_predict",
    "load_model", "load_quality_file", "make_bag", "pearson", "predict",
    "prepare_bags", "read_dataset", "roc_auc", "save_model", "score_bags",
    "subsample_balanced", "train", "write_dataset", "write_report_csv",
    "write_report_json",
]
