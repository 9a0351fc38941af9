"""Semi-supervised pixel-wise soft actor-critic for grasp learning from sparse rewards.

Modules:

- ``autodiff``: tape-based reverse-mode differentiation over numpy arrays
- ``net``: fully convolutional actor/critic, EMA shadow, checkpoints
- ``binsim``: synthetic bin-picking scenes, ground-truth quality and grasp execution
- ``augment``: weak/strong views with pixel correspondence
- ``weights``: FixMatch/FlexMatch/FreeMatch thresholds and per-pixel weights
- ``trainer``: replay buffer, losses, train step and online loop
- ``harness``: method matrix, evaluation, online comparison
"""
from .augment import AugmentConfig, GeometricTransform, align_map, strong_augment, weak_augment
from .autodiff import Tape, Tensor
from .binsim import SceneSpec, execute_grasp, generate_scene, make_eval_set
from .errors import ConfigurationError, GenerationError, NumericError, UsageError
from .harness import ExperimentConfig, OnlineConfig, collect_offline, evaluate_mse, run_matrix
from .net import ConvSAC, EmaModel, load_checkpoint, save_checkpoint, select_grasp
from .trainer import Learner, ReplayBuffer, ReplaySample, TrainConfig, online_loop
from .weights import MethodConfig, apply_topk_budget, compose_lambda

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "GeometricTransform", "align_map", "strong_augment", "weak_augment",
    "Tape", "Tensor",
    "SceneSpec", "execute_grasp", "generate_scene", "make_eval_set",
    "ConfigurationError", "GenerationError", "NumericError", "UsageError",
    "ExperimentConfig", "OnlineConfig", "collect_offline", "evaluate_mse", "run_matrix",
    "ConvSAC", "EmaModel", "load_checkpoint", "save_checkpoint", "select_grasp",
    "Learner", "ReplayBuffer", "ReplaySample", "TrainConfig", "online_loop",
    "MethodConfig", "apply_topk_budget", "compose_lambda",
]
