"""Probabilistic optimal power flow with a neural surrogate.

Train a stacked denoising-autoencoder regressor on oracle OPF solutions,
then answer Monte-Carlo POPF queries by batched inference instead of
repeated optimization. The oracle (quadratic dispatch + Newton-Raphson AC
power flow) doubles as the training-label generator and the accuracy
reference.
"""

from .errors import PopflowError
from .grid import NetworkCase, bundled_case, load_case, parse_case, serialize_case, validate_case
from .pipeline import (compare_methods, compute_statistics, error_metrics,
                       generate_training_data, run_popf, train_popf_model)
from .sampling import CorrelationSpec, sample_operating_conditions
from .sdae import SdaeModel, TrainConfig, load_model, save_model
from .solver import OpfSolution, ac_power_flow, build_ybus, dc_opf, oracle_opf

__version__ = "0.1.0"

__all__ = [
    "PopflowError",
    "NetworkCase", "bundled_case", "load_case", "parse_case", "serialize_case", "validate_case",
    "compare_methods", "compute_statistics", "error_metrics",
    "generate_training_data", "run_popf", "train_popf_model",
    "CorrelationSpec", "sample_operating_conditions",
    "SdaeModel", "TrainConfig", "load_model", "save_model",
    "OpfSolution", "ac_power_flow", "build_ybus", "dc_opf", "oracle_opf",
    "__version__",
]
