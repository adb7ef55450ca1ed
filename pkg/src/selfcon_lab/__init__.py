"""Self-contrastive learning at desk scale: a numpy autodiff core, multi-exit
encoders, SupCon/SelfCon losses, MI estimators and a training harness."""

from .config import ConfigError, TrainConfig, load_config, parse_config
from .encoder import ExitSpec, MultiExitEncoder, build_encoder, default_blocks
from .losses import LossConfig, LossKind, brute_force_oracle, build_index_sets, contrastive_loss
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "TrainConfig",
    "load_config",
    "parse_config",
    "ExitSpec",
    "MultiExitEncoder",
    "build_encoder",
    "default_blocks",
    "LossConfig",
    "LossKind",
    "brute_force_oracle",
    "build_index_sets",
    "contrastive_loss",
    "Tensor",
    "no_grad",
]
