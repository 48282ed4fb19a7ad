"""Deformable attention graphs for bag-of-patches classification."""

from .bagio import Bag, SynthConfig, gen_synthetic, load_dataset, save_dataset, split_stratified
from .dagnet import DagConfig, DagModel, attention_heatmap, forward_bag, load_model, save_model
from .estimator import DAGClassifier
from .exceptions import (
    ConfigError,
    DagError,
    DimensionError,
    FormatError,
    InputError,
    NumericalError,
    StateError,
    UndefinedMetricError,
)
from .spatial import PointIndex, build_index, nearest, nearest_bruteforce
from .trainer import EvalReport, TrainConfig, evaluate, run_repeated, train

__version__ = "0.1.0"

__all__ = [
    "Bag", "SynthConfig", "gen_synthetic", "load_dataset", "save_dataset", "split_stratified",
    "DagConfig", "DagModel", "attention_heatmap", "forward_bag", "load_model", "save_model",
    "DAGClassifier",
    "ConfigError", "DagError", "DimensionError", "FormatError", "InputError",
    "NumericalError", "StateError", "UndefinedMetricError",
    "PointIndex", "build_index", "nearest", "nearest_bruteforce",
    "EvalReport", "TrainConfig", "evaluate", "run_repeated", "train",
]
