"""Identify machine parameters of serial production lines from buffer-level data."""

__version__ = "0.1.0"

from .model import LineConfig, MachineParams, make_line
from .simulator import SimConfig, simulate, simulate_metrics
from .metrics import MetricsVector, compute_metrics, metric_errors
from .surrogate import SurrogateBundle, TrainConfig, train_bundle
from .mpso import PsoConfig, SearchSpace, mpso, pso_run
from .identify import IdentifyBounds, ObservedMetrics, identify, identify_exponential, identify_with_averages

__all__ = [
    "LineConfig", "MachineParams", "make_line",
    "SimConfig", "simulate", "simulate_metrics",
    "MetricsVector", "compute_metrics", "metric_errors",
    "SurrogateBundle", "TrainConfig", "train_bundle",
    "PsoConfig", "SearchSpace", "mpso", "pso_run",
    "IdentifyBounds", "ObservedMetrics", "identify", "identify_exponential", "identify_with_averages",
]
