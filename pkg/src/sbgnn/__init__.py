"""Spectral graph neural network for classifying functional-connectivity graphs."""

from .dataset import (
    ConnectivityMatrix,
    Dataset,
    Graph,
    SyntheticSpec,
    TimeSeriesMatrix,
    build_dataset,
    generate_synthetic,
    load_dataset,
    load_timeseries,
    pearson_matrix,
    save_dataset,
    split_dataset,
    threshold_graph,
)
from .metrics import confusion, paired_t_test, report
from .model import ModelParams, init_params, model_forward
from .spectral import BasisCache, SpectralBasis, gft, igft, normalized_laplacian, symmetric_eigh
from .train import TrainConfig, repeated_runs, train_one

__version__ = "0.1.0"
