"""Graph-convolutional denoising autoencoders for missing-data imputation."""

from .errors import GinnError
from .model import GinnConfig, GinnModel, variant_config
from .simgraph import SimilarityGraph, build_graph, extend_graph
from .tabular import Dataset, attach_labels, inject_mcar, load_csv
from .trainer import TrainConfig, fit_impute, impute, impute_unseen, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GinnConfig",
    "GinnError",
    "GinnModel",
    "SimilarityGraph",
    "TrainConfig",
    "attach_labels",
    "build_graph",
    "extend_graph",
    "fit_impute",
    "impute",
    "impute_unseen",
    "inject_mcar",
    "load_csv",
    "train",
    "variant_config",
]
