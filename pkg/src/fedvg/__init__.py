"""Federated learning simulator with validation-gradient client weighting."""

from .errors import ConfigError, FedVGError, InputError, NumericError, PartitionError, SamplingError, StructuralError
from .federated import ExperimentConfig, ExperimentResult, RoundRecord, run_experiment
from .nn import LayeredParams

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "ExperimentResult", "FedVGError", "InputError", "LayeredParams",
    "NumericError", "PartitionError", "RoundRecord", "SamplingError", "StructuralError", "run_experiment",
]
