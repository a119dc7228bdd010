"""Multi-level dynamic dense graph networks for skeleton motion forecasting."""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, SynthConfig, build_run_config
from .data import MotionSequence, parse_skel, synthesize_dataset, write_skel
from .estimator import DDGCNForecaster
from .exceptions import (
    BoundsError,
    ConfigError,
    DDGCNError,
    DimensionError,
    HorizonError,
    NumericError,
    ParseError,
    TopologyError,
    TrainingDivergedError,
)
from .graph import SkeletonTopology, build_dense_adjacency, chain_topology, h36m_topology
from .model import DDGCN, ModelConfig, init_params, param_count
from .training import TrainConfig, evaluate_horizons, fit, mpjpe_loss

__version__ = "0.1.0"

__all__ = [
    "DDGCN", "DDGCNForecaster", "ModelConfig", "TrainConfig", "RunConfig", "SynthConfig",
    "MotionSequence", "SkeletonTopology", "build_dense_adjacency", "build_run_config",
    "chain_topology", "h36m_topology", "init_params", "param_count", "fit",
    "evaluate_horizons", "mpjpe_loss", "parse_skel", "write_skel", "synthesize_dataset",
    "save_checkpoint", "load_checkpoint", "DDGCNError", "DimensionError", "ConfigError",
    "TopologyError", "NumericError", "BoundsError", "HorizonError", "ParseError",
    "TrainingDivergedError",
]
