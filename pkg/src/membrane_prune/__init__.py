"""Structured pruning of a membrane-patch CNN by greedy loss-based feature-map ordering."""

from .errors import (FormatError, InputError, NumericError, PruneError, ShapeError,
                     StructuralError)
from .net import LAYERS, PRUNABLE, NAMED_CONFIGS, Network, NetworkConfig, build, count_params, load, save, shrink
from .prune import LossEstimator, PruneOrdering, PrunePlan, apply_plan, order_layer, order_network
from .train import TrainConfig, fit, retrain

__version__ = "0.1.0"

__all__ = [
    "FormatError", "InputError", "NumericError", "PruneError", "ShapeError", "StructuralError",
    "LAYERS", "PRUNABLE", "NAMED_CONFIGS", "Network", "NetworkConfig", "build", "count_params",
    "load", "save", "shrink", "LossEstimator", "PruneOrdering", "PrunePlan", "apply_plan",
    "order_layer", "order_network", "TrainConfig", "fit", "retrain",
]
