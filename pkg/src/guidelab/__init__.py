"""guidelab: guided training of hard-to-train networks against a frozen guide's representations."""
from ._kernels import BACKEND
from .analysis import ErrorConsistencyReport, PredictionSet, emit_curves, error_consistency, extract_dissim_curves
from .config import ExperimentConfig, load_config
from .guidance import GuidanceConfig, LayerMapping, MappingError, compute_layer_mapping, guided_loss
from .harness import EpochRecord, RunSummary, evaluate, lr_sweep, run_experiment, select_best_epoch
from .nets import NetworkSpec, build_network, forward, forward_with_taps
from .similarity import cka_dissimilarity, linear_cka, rsa_dissimilarity, rsa_similarity

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ExperimentConfig", "load_config", "GuidanceConfig", "LayerMapping", "MappingError",
    "compute_layer_mapping", "guided_loss", "EpochRecord", "RunSummary", "evaluate", "lr_sweep",
    "run_experiment", "select_best_epoch", "NetworkSpec", "build_network", "forward",
    "forward_with_taps", "linear_cka", "cka_dissimilarity", "rsa_similarity", "rsa_dissimilarity",
    "PredictionSet", "ErrorConsistencyReport", "error_consistency", "extract_dissim_curves",
    "emit_curves",
]
