"""Bayesian-Hebbian hypercolumn network engine."""

from .config import NetworkConfig, load_config, mnist_config, parse_config, validate_config
from .encoding import Dataset, complementary_encode, load_idx, load_raw_gray
from .errors import BcpnnError
from .inference import InferenceKernel, InferenceResult, compute_support, evaluate, predict, soft_wta
from .learning import (
    FullKernel,
    TrainingParams,
    connection_score,
    derive_weights,
    rewire,
    train_full,
    train_supervised,
    train_unsupervised,
    update_traces,
)
from .network import NetworkState, build_network
from .precision import FP16, FP32, MIXED, PrecisionMode

__version__ = "0.1.0"
